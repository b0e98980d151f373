"""Grounding programs: parsing, retrieval and plan-then-execute."""
