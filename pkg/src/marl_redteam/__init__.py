"""Desk-scale robustness test-bench for cooperative multi-agent RL.

Train a QMIX team in the MicroBattle skirmish, then mount the two-step
single-victim attack: learn an adversarial target-selection policy and
force its choices with targeted observation perturbations.
"""

__version__ = "0.1.0"

from . import advexample, advpolicy, checkpoint, diffnet, env, harness, qmix

__all__ = ["advexample", "advpolicy", "checkpoint", "diffnet", "env",
           "harness", "qmix", "__version__"]
