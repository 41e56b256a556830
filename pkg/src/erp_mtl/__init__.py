"""Multitask prediction of per-word ERP and behavioral signals from recurrent LM encoders."""

__version__ = "0.1.0"
FORMAT_VERSION = "erp-mtl/1"
