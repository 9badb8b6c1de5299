"""Run-time specializing compiler and engine for a packet-pipeline IR."""

__version__ = "0.1.0"
