"""Sensiprint - 基于 Sensitive-Samples 的模型完整性验证工具"""

__version__ = "0.1.0"

from sensiprint.errors import SensiprintError
from sensiprint.nn import Model, forward, load_model, save_model
from sensiprint.sensitivity import ParamSelector, sensitivity
from sensiprint.samplegen import GenConfig, generate
from sensiprint.manc import activation_pattern, manc_select
from sensiprint.fingerprint import OutputSpec, build_fingerprint, verify
