"""Utility modules for the pseudo-label polishing simulator"""
