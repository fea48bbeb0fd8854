"""Desk-scale particulate air-quality monitoring.

Simulated sensor stations stream PM2.5/PM10/temperature telemetry over
HTTP+JSON to an ingestion service that computes the Central American Air
Quality Index (ICCA), persists the time series, and evaluates alert rules.
"""

__version__ = "0.1.0"
