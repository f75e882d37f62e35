#!/usr/bin/env python3
"""Independent high-precision evaluation of the closed-form values frozen into the unit tests."""
from mpmath import mp, mpf, exp, log, tanh, sqrt, pi

mp.dps = 40


def softmax(xs):
    es = [exp(mpf(x)) for x in xs]
    s = sum(es)
    return [e / s for e in es]


def entropy(ps):
    return -sum(p * log(p) for p in ps if p > 0)


def gelu_tanh(x):
    x = mpf(x)
    return mpf("0.5") * x * (1 + tanh(sqrt(2 / pi) * (x + mpf("0.044715") * x**3)))


def kl_as_printed(mu, sig, mu_r, sig_r):
    # KL(N_r || N_theta) in the printed orientation, per dimension sum
    acc = mpf(0)
    for m, s, mr, sr in zip(mu, sig, mu_r, sig_r):
        acc += log(s**2) - log(sr**2) - 1 + sr**2 / s**2 + (m - mr) ** 2 / s**2
    return acc / 2


print("softmax[1,2,3]", [mp.nstr(p, 17) for p in softmax([1, 2, 3])])
p4 = softmax([1, 2, 3, 4])
print("softmax[1,2,3,4]", [mp.nstr(p, 17) for p in p4])
print("entropy[1,2,3,4]", mp.nstr(entropy(p4), 17))
print("ce -ln p4[3]", mp.nstr(-log(p4[3]), 17))
print("softplus(0)", mp.nstr(log(2), 17))
print("gelu(1)", mp.nstr(gelu_tanh(1), 17))
print("gelu(10)", mp.nstr(gelu_tanh(10), 17))
print("kl case mu=(1,0)", mp.nstr(kl_as_printed([1, 0], [1, 1], [0, 0], [1, 1]), 17))
print("kl case sigma=sqrt2", mp.nstr(kl_as_printed([0, 0], [sqrt(2), sqrt(2)], [0, 0], [1, 1]), 17))
print("beta at nH=0.5", mp.nstr(-mpf("1e-7") * log(mpf("0.5")), 17))
print("beta cap", mp.nstr(-log(mpf("1e-6")), 17))
