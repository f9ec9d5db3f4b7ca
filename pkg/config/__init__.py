"""Run configuration, logging setup and environment settings"""
