"""Test suite for pytsr."""
