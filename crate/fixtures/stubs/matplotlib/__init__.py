"""Stand-in for matplotlib: records calls, writes a placeholder file on savefig."""
