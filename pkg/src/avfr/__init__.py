"""Audio-visual face reenactment on a procedural synthetic world, plus a
keypoint-stream compression format."""

__version__ = "0.1.0"
