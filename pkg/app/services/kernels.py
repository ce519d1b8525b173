"""
Compiled inner loops shared by the model, dynamics and disorder services.

Conventions used by every kernel:
    A       symmetric float64 coupling matrix, C-contiguous
    spins   float64 vector of +1/-1
    fields  float64 local fields L_i = (A s)_i - A_ii s_i
    state   integer index of a configuration, bit i set <=> spin i is +1
"""
import math

import numpy as np
from numba import njit

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)


@njit(cache=True)
def heat_bath_probability(beta, delta):
    """Flip probability 1 / (1 + exp(-beta * delta)) without overflow"""
    x = beta * delta
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def fresh_energy_and_fields(A, spins, fields):
    """Fill fields for spins and return the energy <s, A s> / 2"""
    n = spins.shape[0]
    energy = 0.0
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += A[i, j] * spins[j]
        energy += 0.5 * spins[i] * acc
        fields[i] = acc - A[i, i] * spins[i]
    return energy


@njit(cache=True)
def flip_inplace(A, spins, fields, i):
    """Flip site i, update every other local field, return the energy change"""
    s = spins[i]
    delta = -2.0 * s * fields[i]
    n = spins.shape[0]
    for j in range(n):
        if j != i:
            fields[j] -= 2.0 * A[j, i] * s
    spins[i] = -s
    return delta


@njit(cache=True)
def _trailing_zeros(k):
    i = 0
    while (k >> i) & 1 == 0:
        i += 1
    return i


@njit(cache=True)
def _spins_from_state(state, n, spins):
    for i in range(n):
        spins[i] = 1.0 if (state >> i) & 1 else -1.0


@njit(cache=True, nogil=True)
def gray_code_energies(A):
    """Energy of every configuration, indexed by state, via a reflected Gray-code sweep"""
    n = A.shape[0]
    total = 1 << n
    energies = np.empty(total, dtype=np.float64)
    spins = -np.ones(n, dtype=np.float64)
    fields = np.empty(n, dtype=np.float64)
    energy = fresh_energy_and_fields(A, spins, fields)
    state = 0
    energies[0] = energy
    for k in range(1, total):
        i = _trailing_zeros(k)
        energy += flip_inplace(A, spins, fields, i)
        state ^= 1 << i
        energies[state] = energy
    return energies


@njit(cache=True, nogil=True)
def gray_code_logsumexp(A, beta, start, stop):
    """
    log sum exp(beta * H) over the Gray-code positions [start, stop).

    Position k visits the configuration with state k ^ (k >> 1).
    """
    n = A.shape[0]
    spins = np.empty(n, dtype=np.float64)
    fields = np.empty(n, dtype=np.float64)
    _spins_from_state(start ^ (start >> 1), n, spins)
    energy = fresh_energy_and_fields(A, spins, fields)
    peak = beta * energy
    acc = 1.0
    for k in range(start + 1, stop):
        i = _trailing_zeros(k)
        energy += flip_inplace(A, spins, fields, i)
        v = beta * energy
        if v > peak:
            acc = acc * math.exp(peak - v) + 1.0
            peak = v
        else:
            acc += math.exp(v - peak)
    return peak + math.log(acc)


@njit(cache=True, nogil=True)
def glauber_block(A, spins, fields, energy, beta, sites, uniforms, start, stop):
    """
    Heat-bath Glauber steps for draws [start, stop).

    Returns (energy, accepted flips, accepted energy-decreasing flips).
    """
    accepted = 0
    downhill = 0
    for k in range(start, stop):
        i = sites[k]
        delta = -2.0 * spins[i] * fields[i]
        if uniforms[k] < heat_bath_probability(beta, delta):
            energy += flip_inplace(A, spins, fields, i)
            accepted += 1
            if delta < 0.0:
                downhill += 1
    return energy, accepted, downhill


@njit(cache=True, nogil=True)
def glauber_histogram(A, spins, fields, beta, sites, uniforms, start, stop, state, counts):
    """Heat-bath steps for draws [start, stop), counting the state after every step"""
    for k in range(start, stop):
        i = sites[k]
        delta = -2.0 * spins[i] * fields[i]
        if uniforms[k] < heat_bath_probability(beta, delta):
            flip_inplace(A, spins, fields, i)
            state ^= 1 << i
        counts[state] += 1
    return state


@njit(cache=True, nogil=True)
def glauber_until_exit(A, spins, fields, energy, beta, sites, uniforms, start, stop, reference, distance, radius):
    """
    Heat-bath steps until the Hamming distance to reference exceeds radius.

    Returns (draws consumed, distance, energy, exited).
    """
    for k in range(start, stop):
        i = sites[k]
        delta = -2.0 * spins[i] * fields[i]
        if uniforms[k] < heat_bath_probability(beta, delta):
            energy += flip_inplace(A, spins, fields, i)
            if spins[i] != reference[i]:
                distance += 1
            else:
                distance -= 1
            if distance > radius:
                return k - start + 1, distance, energy, True
    return stop - start, distance, energy, False


@njit(cache=True)
def fnv1a64(data):
    """64-bit FNV-1a hash of a uint8 array"""
    h = FNV_OFFSET
    for b in data:
        h ^= np.uint64(b)
        h *= FNV_PRIME
    return h
