"""Logging, configuration, storage and plotting helpers for blockprune"""
