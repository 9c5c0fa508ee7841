"""Flat-FHIR ETL and multi-label diagnosis prediction over MIMIC-III-schema
tables: streaming CSV-to-JSON resource transformation, chart-event binning,
CCS label encoding, iterative stratified splitting, small-network training,
note chunk scoring/aggregation and threshold-free evaluation."""

__version__ = "0.1.0"
