"""Euler-angle rotation and kinematics matrices, batched, with partials.

Angle convention is (roll phi, pitch theta, yaw psi). Both vehicle models use
the same direction-cosine matrix R and the same body-rate-to-Euler-rate
kinematics matrix K; K is singular at |theta| = pi/2.
"""

from __future__ import annotations

import numpy as np

GIMBAL_LIMIT = np.pi / 2 - 1e-6


def rotation(angles: np.ndarray) -> np.ndarray:
    """Direction cosine matrix, (B, 3) -> (B, 3, 3)."""
    ph, th, ps = angles[:, 0], angles[:, 1], angles[:, 2]
    cf, sf = np.cos(ph), np.sin(ph)
    ct, st = np.cos(th), np.sin(th)
    cp, sp = np.cos(ps), np.sin(ps)
    R = np.empty(angles.shape[:1] + (3, 3))
    R[:, 0, 0] = ct * cp
    R[:, 0, 1] = ct * sp
    R[:, 0, 2] = -st
    R[:, 1, 0] = sf * st * cp - cf * sp
    R[:, 1, 1] = sf * st * sp + cf * cp
    R[:, 1, 2] = ct * sf
    R[:, 2, 0] = cf * st * cp + sf * sp
    R[:, 2, 1] = cf * st * sp - sf * cp
    R[:, 2, 2] = ct * cf
    return R


def rotation_partials(angles: np.ndarray):
    """(R, dR/dphi, dR/dtheta, dR/dpsi), each (B, 3, 3)."""
    ph, th, ps = angles[:, 0], angles[:, 1], angles[:, 2]
    cf, sf = np.cos(ph), np.sin(ph)
    ct, st = np.cos(th), np.sin(th)
    cp, sp = np.cos(ps), np.sin(ps)
    B = angles.shape[0]
    R = rotation(angles)

    dphi = np.zeros((B, 3, 3))
    dphi[:, 1] = R[:, 2]
    dphi[:, 2] = -R[:, 1]

    dth = np.empty((B, 3, 3))
    dth[:, 0, 0] = -st * cp
    dth[:, 0, 1] = -st * sp
    dth[:, 0, 2] = -ct
    dth[:, 1, 0] = sf * ct * cp
    dth[:, 1, 1] = sf * ct * sp
    dth[:, 1, 2] = -st * sf
    dth[:, 2, 0] = cf * ct * cp
    dth[:, 2, 1] = cf * ct * sp
    dth[:, 2, 2] = -st * cf

    dpsi = np.zeros((B, 3, 3))
    dpsi[:, 0, 0] = -ct * sp
    dpsi[:, 0, 1] = ct * cp
    dpsi[:, 1, 0] = -sf * st * sp - cf * cp
    dpsi[:, 1, 1] = sf * st * cp - cf * sp
    dpsi[:, 2, 0] = -cf * st * sp + sf * cp
    dpsi[:, 2, 1] = cf * st * cp + sf * sp
    return R, dphi, dth, dpsi


def kinematics(angles: np.ndarray) -> np.ndarray:
    """Body rates -> Euler-angle rates matrix, (B, 3) -> (B, 3, 3)."""
    ph, th = angles[:, 0], angles[:, 1]
    cf, sf = np.cos(ph), np.sin(ph)
    tt = np.tan(th)
    sec = 1.0 / np.cos(th)
    K = np.zeros(angles.shape[:1] + (3, 3))
    K[:, 0, 0] = 1.0
    K[:, 0, 1] = sf * tt
    K[:, 0, 2] = cf * tt
    K[:, 1, 1] = cf
    K[:, 1, 2] = -sf
    K[:, 2, 1] = sf * sec
    K[:, 2, 2] = cf * sec
    return K


def kinematics_partials(angles: np.ndarray):
    """(K, dK/dphi, dK/dtheta), each (B, 3, 3). K has no psi dependence."""
    ph, th = angles[:, 0], angles[:, 1]
    cf, sf = np.cos(ph), np.sin(ph)
    tt = np.tan(th)
    sec = 1.0 / np.cos(th)
    B = angles.shape[0]
    K = kinematics(angles)

    dphi = np.zeros((B, 3, 3))
    dphi[:, 0, 1] = cf * tt
    dphi[:, 0, 2] = -sf * tt
    dphi[:, 1, 1] = -sf
    dphi[:, 1, 2] = -cf
    dphi[:, 2, 1] = cf * sec
    dphi[:, 2, 2] = -sf * sec

    dth = np.zeros((B, 3, 3))
    dth[:, 0, 1] = sf * sec * sec
    dth[:, 0, 2] = cf * sec * sec
    dth[:, 2, 1] = sf * tt * sec
    dth[:, 2, 2] = cf * tt * sec
    return K, dphi, dth


def crossmat(a: np.ndarray) -> np.ndarray:
    """(B, 3) -> (B, 3, 3) with crossmat(a) @ b = a x b."""
    Z = np.zeros(a.shape[:1] + (3, 3))
    Z[:, 0, 1] = -a[:, 2]
    Z[:, 0, 2] = a[:, 1]
    Z[:, 1, 0] = a[:, 2]
    Z[:, 1, 2] = -a[:, 0]
    Z[:, 2, 0] = -a[:, 1]
    Z[:, 2, 1] = a[:, 0]
    return Z


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product without np.cross overhead."""
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out
