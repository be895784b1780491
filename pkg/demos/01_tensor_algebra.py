"""Tensor reshaping and contraction basics.

Shows the axis conventions the whole package leans on: 1-based mode
numbers, mode-n flattening with last-remaining-axis-fastest fibre order,
and the contraction that generalises the matrix product.
"""
import numpy as np

from dmtrl import frobenius_norm, mode_n_flatten, mode_n_unflatten, tensor_dot

rng = np.random.default_rng(0)

# A 3-way tensor: think of it as a stack of four 2x3 matrices.
w = rng.normal(size=(2, 3, 4))
print("tensor shape:", w.shape)

# Mode-n flattening lines up all mode-n fibres as columns.
for n in (1, 2, 3):
    m = mode_n_flatten(w, n)
    print(f"mode-{n} flattening: {m.shape}, norm preserved:",
          np.isclose(frobenius_norm(m), frobenius_norm(w)))

# ... and unflattening inverts it exactly.
m2 = mode_n_flatten(w, 2)
back = mode_n_unflatten(m2, w.shape, 2)
print("round trip bit-exact:", np.array_equal(back, w))

# For matrices, flattening is just identity / transpose.
a = rng.normal(size=(3, 5))
print("mode-1 of a matrix is itself:", np.array_equal(mode_n_flatten(a, 1), a))
print("mode-2 is its transpose:     ", np.array_equal(mode_n_flatten(a, 2), a.T))

# tensor_dot contracts one axis of each argument; with two matrices and
# axes (2, 1) it is the ordinary matrix product.
b = rng.normal(size=(5, 4))
print("matrix product special case: ",
      np.allclose(tensor_dot(a, b, 2, 1), a @ b))

# In general the result keeps a's remaining axes then b's remaining axes.
x = rng.normal(size=(2, 5, 3))
y = rng.normal(size=(4, 5, 6))
z = tensor_dot(x, y, 2, 2)   # contract the two length-5 axes
print("contraction (2,5,3)x(4,5,6) over the 5s ->", z.shape)

# The last axis can be named as -1, handy when rank varies.
print("-1 aliases the last axis:",
      np.array_equal(mode_n_flatten(w, -1), mode_n_flatten(w, 3)))
