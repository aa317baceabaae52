"""maskfuse: fuse per-frame 2D instance masks into a queryable 3D instance map."""

__version__ = "0.1.0"
