"""Dense RGB-D SLAM with a neural implicit map and motion-mask filtering."""

__version__ = "0.1.0"
