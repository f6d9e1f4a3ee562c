"""Protocol messages and role state machines."""
