"""Watermark-windowed change-data-capture over a simulated source database."""

from .model import LogEvent, OutputEvent, WatermarkPair, compare_keys, decode_output_event, encode_output_event

__version__ = "0.1.0"
