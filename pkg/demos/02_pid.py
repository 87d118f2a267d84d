"""Partial information decomposition of small discrete joints.

Shows the four textbook gates and how a synthetic generator is certified:
the noiseless version of each dataset family has a known dominant component.

Run: python3 demos/02_pid.py
"""
from intermoe.pidoracle import (and_joint, classify_dominant, copy_joint, pid_decompose,
                                unique1_joint, xor_joint)
from intermoe.synthdata import noiseless_joint

print(f"{'joint':<8}{'red':>8}{'unq1':>8}{'unq2':>8}{'syn':>8}")
for name, joint in [("xor", xor_joint()), ("and", and_joint()), ("copy", copy_joint()),
                    ("unique1", unique1_joint())]:
    r = pid_decompose(joint)
    print(f"{name:<8}{r.red:8.4f}{r.unq1:8.4f}{r.unq2:8.4f}{r.syn:8.4f}")

print()
for component in ("uni1", "uni2", "red", "syn"):
    print(f"generator for {component:<4} -> dominant component {classify_dominant(noiseless_joint(component))}")
