"""Constrained gradient flow for prescribed curvature on conical surfaces."""
