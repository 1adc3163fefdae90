"""Emotion recognition from OpenPose body and face keypoints with small
fully connected networks trained by hand-written backpropagation."""

__version__ = "0.1.0"
