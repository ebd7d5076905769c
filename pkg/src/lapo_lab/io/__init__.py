"""Persistence and ambient plumbing: settings, config records, binary formats, metrics."""
