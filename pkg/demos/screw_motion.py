"""Screw motions on SE(3): the exponential map, its closed-form G(theta), and
how a pose chain sweeps out a camera path."""

import numpy as np
from scipy.linalg import expm

from splatdeblur.liegroup import Pose, ScrewAxis, compose, se3_exp, se3_G, screw_matrix, geodesic_angle

# a screw: unit axis, angle, and the translational part v
axis = np.array([0.0, 0.6, 0.8])
v = np.array([0.3, -0.1, 0.2])
theta = 0.7

T = se3_exp(ScrewAxis(axis, v, theta))
print("closed form:\n", T.matrix().round(6))

# the same thing from the generic matrix exponential
xi = screw_matrix(ScrewAxis(axis, v, theta))
print("scipy expm agrees to", np.abs(expm(xi) - T.matrix()).max())

# translation is G(theta) v, with G the integral of the rotation over the angle
G = se3_G(axis, theta)
print("t == G v:", np.allclose(T.t, G @ v))

# sweep a camera along the screw, starting from a pose looking down +z
anchor = Pose(np.eye(3), np.array([0.0, 0.0, -3.0]))
for tau in np.linspace(0, 1, 5):
    s = 2 * tau - 1
    P = compose(anchor, se3_exp(ScrewAxis(axis, v, 0.05 * s)))
    print(f"tau={tau:.2f}  angle from anchor={geodesic_angle(anchor.R, P.R):.4f} rad  t={P.t.round(4)}")
