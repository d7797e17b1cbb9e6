"""Distributed DC optimal power flow under nonideal inter-region communication."""

__version__ = "0.1.0"
