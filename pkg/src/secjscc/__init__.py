"""Secure joint source-channel coding of multimodal sources over wiretap channels.

Library modules:

* ``prob``       finite probability arithmetic (bits)
* ``lattice``    modality subsets and the multimodal source model
* ``rdpf``       rate-distortion-perception solver and grid oracle
* ``wiretap``    wiretap channel, capacity, secrecy term, layered auxiliaries
* ``region``     outer/inner equivocation bounds and rate allocation
* ``simulator``  Monte Carlo run of the layered coding scheme
"""
__version__ = "0.1.0"
