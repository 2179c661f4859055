"""Tests for nightreid."""
