"""Exact rational rank of the vanishing-lemma constraint system, built from
the linearized Weyl tensor of delta + H with sympy; outputs frozen in tests.

    python3 tests/oracles/rank_oracle.py
"""
from itertools import combinations_with_replacement

import sympy as sp
from sympy.polys.matrices import DomainMatrix


def kernel_dim(n, d, normal=True):
    X = sp.symbols(f"x0:{n}")
    xn = X[-1]
    monos = [xn] + [sp.Mul(*c) for k in range(2, d + 1)
                    for c in combinations_with_replacement(X, k)]
    unknowns = []
    H = sp.zeros(n, n)
    for i in range(n - 1):
        for j in range(i, n - 1):
            e = 0
            for mono in monos:
                c = sp.Symbol(f"c_{i}_{j}_{len(unknowns)}")
                unknowns.append(c)
                e += c * mono
            H[i, j] = H[j, i] = e
    eqs = []

    def coeffs(expr):
        expr = sp.expand(expr)
        if expr == 0:
            return []
        return sp.Poly(expr, *X).coeffs()

    eqs += coeffs(sum(H[i, i] for i in range(n - 1)))
    on_bd = {xn: 0}
    for i in range(n - 1):
        eqs += coeffs(sum(X[j] * H[i, j].subs(on_bd) for j in range(n - 1)))
    if normal:
        for i in range(n - 1):
            for j in range(i, n - 1):
                eqs += coeffs(sp.diff(H[i, j], xn).subs(on_bd))
    # linearized Riemann and Weyl of delta + H
    dd = [[[[sp.diff(H[a, b], X[c], X[e]) for e in range(n)] for c in range(n)]
           for b in range(n)] for a in range(n)]
    Rm = lambda a, b, c, e: (dd[a][e][b][c] + dd[b][c][a][e] - dd[a][c][b][e] - dd[b][e][a][c]) / 2
    ric = [[sum(Rm(a, b, a, e) for a in range(n)) for e in range(n)] for b in range(n)]
    R = sum(ric[b][b] for b in range(n))
    dl = lambda a, b: 1 if a == b else 0
    for a in range(n):
        for b in range(a + 1, n):
            for c in range(n):
                for e in range(c + 1, n):
                    W = (Rm(a, b, c, e)
                         - (ric[a][c] * dl(b, e) - ric[a][e] * dl(b, c)
                            + ric[b][e] * dl(a, c) - ric[b][c] * dl(a, e)) / (n - 2)
                         + R * (dl(a, c) * dl(b, e) - dl(a, e) * dl(b, c)) / ((n - 1) * (n - 2)))
                    eqs += coeffs(W)
    A, _ = sp.linear_eq_to_matrix(eqs, unknowns)
    rank = DomainMatrix.from_Matrix(A).convert_to(sp.QQ).rank()
    return len(unknowns) - rank


if __name__ == "__main__":
    for n, d in ((4, 1), (5, 1), (6, 2), (7, 2)):
        print("kernel", n, d, kernel_dim(n, d))
    print("ablated", 6, 2, kernel_dim(6, 2, normal=False))
