# src/layer2 package: range-image projection, frames and normals
