# Acceptance suites at full particle counts
