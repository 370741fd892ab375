"""Shared finite-difference oracles for the loss-gradient checks."""

import numpy as np
import torch

from kdpinn.jets import loss_param_gradient
from kdpinn.sampling import role_streams, sample_role
from kdpinn.training import student_loss, teacher_loss


def fixed_batches(problem, n, seed, with_kd=True):
    roles = problem.roles if with_kd else tuple(r for r in problem.roles if r != "distillation")
    streams = role_streams(seed, problem.dim, roles)
    return {r: sample_role(problem, r, n, streams[r]) for r in roles}


def fd_param_gradient(net, loss_fn):
    """Central differences with h = 1e-6 * max(1, |theta_i|)."""
    theta = net.flat_parameters().clone()
    out = np.zeros(theta.numel())
    for i in range(theta.numel()):
        h = 1e-6 * max(1.0, abs(theta[i].item()))
        for sign in (1, -1):
            t = theta.clone()
            t[i] += sign * h
            net.set_flat_parameters(t)
            with torch.no_grad():
                out[i] += sign * float(loss_fn(net))
        out[i] /= 2 * h
    net.set_flat_parameters(theta)
    return out


def gradient_rel_error(net, loss_fn):
    """Worst coordinate relative error; tiny coordinates are measured against 1e-3 of the largest."""
    _, g = loss_param_gradient(net, loss_fn)
    fd = fd_param_gradient(net, loss_fn)
    a = g.flat.numpy()
    floor = 1e-3 * np.abs(fd).max()
    return float(np.max(np.abs(a - fd) / np.maximum(np.abs(fd), floor)))


def teacher_fn(problem, batches, weights):
    return lambda n: teacher_loss(n, problem, batches, weights)[0]


def student_fn(problem, teacher, batches, weights, c=1.0):
    return lambda n: student_loss(n, teacher, problem, batches, weights, c)[0]
