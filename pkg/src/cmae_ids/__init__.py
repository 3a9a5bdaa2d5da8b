"""Payload-based intrusion detection with a convolutional multi-head attention
ensemble (CMAE), implemented on numpy."""

from .data import ClassLabel, DatasetSplit, PayloadRecord, load_dataset, stratified_split
from .model import CmaeConfig, build_model, count_parameters, forward, predict_proba
from .tokenize import Tokenizer, hex2int_map

__version__ = "0.1.0"

__all__ = [
    "ClassLabel", "CmaeConfig", "DatasetSplit", "PayloadRecord", "Tokenizer",
    "build_model", "count_parameters", "forward", "hex2int_map", "load_dataset",
    "predict_proba", "stratified_split",
]
