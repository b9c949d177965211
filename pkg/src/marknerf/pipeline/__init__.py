"""Orchestration, persistence and the ownership-verification protocol."""
