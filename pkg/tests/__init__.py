"""Tests for replsynth."""
