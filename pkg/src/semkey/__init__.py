"""Semantic key module for text watermarking, plus the mark modules, detector,
attacks and experiment harness needed to evaluate it on a toy n-gram LM."""

from .detect import CostDistribution, DetectionReport, detect, pvalue_gamma
from .keymod import SimKeyParams, make_key_module, simkey
from .markmod import make_mark_module
from .textmodel import load_builtin

__all__ = ["CostDistribution", "DetectionReport", "SimKeyParams", "detect", "load_builtin",
           "make_key_module", "make_mark_module", "pvalue_gamma", "simkey"]
__version__ = "0.1.0"
