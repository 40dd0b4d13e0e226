# src/layer3 package: tensor engine, segmentation network and losses
