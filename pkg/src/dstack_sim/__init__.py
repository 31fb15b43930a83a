"""Software simulation of a zero-trust TEE application platform.

Simulated confidential VMs with measured boot and quotes, on-chain style
governance, a KMS node network with threshold custody and rotation, a
certificate-issuing gateway and rollback-protected sealed storage.
"""

__version__ = "0.1.0"
