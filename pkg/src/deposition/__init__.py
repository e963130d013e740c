"""Simulation and verification tools for attractive deposition processes."""
