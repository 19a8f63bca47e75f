"""Pump and storage scheduling for water networks.

A genetic algorithm searches pump statuses and starting tank levels; each
candidate is scored through a trained neural-network surrogate of the
hydraulics, and the winner is replayed through the mass-balance simulator.
"""
__version__ = "0.1.0"
