"""Bottleneck conditional density estimation."""
