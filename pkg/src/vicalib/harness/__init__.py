"""CLI, configuration, data ingestion, experiment runners, reports."""
