"""Utilities package."""