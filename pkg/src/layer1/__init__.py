# src/layer1 package: scans, labels, rig and synthetic scenes
