"""Desk-scale vision-language-action driving planner on synthetic scenarios.

A single causal transformer reads memory, scene and ego-state tokens, answers
questions by next-token prediction and plans a waypoint trajectory with a
flow-matching action head, conditioned on a discrete driving intent.
"""

__version__ = "0.1.0"
