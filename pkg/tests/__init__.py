"""Test suite for the bmsfed simulator."""
