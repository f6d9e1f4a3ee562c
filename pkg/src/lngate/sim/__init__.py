"""Deterministic discrete-event simulation of the protocol."""
