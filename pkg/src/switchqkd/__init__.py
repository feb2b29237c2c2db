"""Simulator and service suite for a dynamically switched four-node QKD
network with PUF-based authentication of every new link."""

__version__ = "0.1.0"
