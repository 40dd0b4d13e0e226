# src/layer4 package: training, inference pipeline, metrics and reports
