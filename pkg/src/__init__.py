# Dental plaque segmentation package
