"""Desk-scale performance monitoring stack for SGX enclave workloads."""

__version__ = "0.1.0"
