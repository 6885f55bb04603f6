"""Discrete flow-matching planner for gridworld tasks."""
