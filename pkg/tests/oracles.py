"""Brute-force reference implementations written with explicit Python loops.

They share no code with the package: every matrix product, softmax and
lookup is spelled out element by element on nested lists of floats.
"""
import math


def tolist(t):
    return t.detach().double().tolist()


def linear(x, weight, bias=None):
    """x: rows of length in; weight: out x in (torch layout)."""
    out = []
    for row in x:
        r = []
        for o in range(len(weight)):
            acc = 0.0
            for i in range(len(row)):
                acc += row[i] * weight[o][i]
            r.append(acc + (bias[o] if bias is not None else 0.0))
        out.append(r)
    return out


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def softmax_row(row):
    m = max(row)
    ex = [math.exp(v - m) for v in row]
    z = sum(ex)
    return [v / z for v in ex]


def cross_modal_similarity(E0, S, W_e, W_s):
    e = linear(E0, W_e)
    s = linear(S, W_s)
    D = len(e[0])
    A = []
    for i in range(len(e)):
        sims = [math.exp(dot(e[i], s[j]) / math.sqrt(D)) for j in range(len(s))]
        z = sum(sims)
        A.append([v / z for v in sims])
    return A


def text_driven_init(A, S, P_s, W_v):
    v = linear(S, W_v)
    pos, emb = [], []
    for i in range(len(A)):
        pos.append([sum(A[i][j] * P_s[j][c] for j in range(len(P_s))) for c in range(3)])
        emb.append([sum(A[i][j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))])
    return pos, emb


def self_attention(E, B, wq, bq, wk, bk):
    x = [[E[i][c] + B[i][c] for c in range(len(E[0]))] for i in range(len(E))]
    q = linear(x, wq, bq)
    k = linear(x, wk, bk)
    D = len(q[0])
    return [softmax_row([dot(q[i], k[j]) / math.sqrt(D) for j in range(len(k))]) for i in range(len(q))]


def rpe_bin(d, R, bins):
    d = min(max(d, -R), R)
    b = math.floor((d + R) / (2 * R) * bins)
    return min(max(b, 0), bins - 1)


def relative_pos_bias(P_t, P_s, table, R, bins):
    """table: axes x bins for a single head."""
    out = []
    for i in range(len(P_t)):
        row = []
        for j in range(len(P_s)):
            acc = 0.0
            for a in range(3):
                acc += table[a][rpe_bin(P_t[i][a] - P_s[j][a], R, bins)]
            row.append(acc)
        out.append(row)
    return out


def cross_attention(E_dot, B_t, S, B_s, B_r, w_query, w_key, w_val):
    q = linear([a + b for a, b in zip(E_dot, B_t)], w_query)
    k = linear([a + b for a, b in zip(S, B_s)], w_key)
    v = linear(S, w_val)
    D = len(E_dot[0])
    attn = [softmax_row([dot(q[i], k[j]) / math.sqrt(D) + B_r[i][j] for j in range(len(k))])
            for i in range(len(q))]
    out = [[sum(attn[i][j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))] for i in range(len(q))]
    return out, attn


def sigmoid(x):
    return 1 / (1 + math.exp(-x)) if x >= 0 else math.exp(x) / (1 + math.exp(x))


def response_map(kernel, S):
    M = [sigmoid(dot(kernel, s)) for s in S]
    return M, [m > 0.5 for m in M]


def bce(M, Y, eps=1e-7):
    total = 0.0
    for m, y in zip(M, Y):
        m = min(max(m, eps), 1 - eps)
        total += -(y * math.log(m) + (1 - y) * math.log(1 - m))
    return total / len(M)


def dice(M, Y, smooth=1.0):
    inter = sum(m * y for m, y in zip(M, Y))
    return 1 - (2 * inter + smooth) / (sum(M) + sum(Y) + smooth)


def position(P, G):
    return sum(abs(p - g) for p, g in zip(P, G)) / 3


def iou(mask, Y):
    inter = sum(1 for m, y in zip(mask, Y) if m and y)
    union = sum(1 for m, y in zip(mask, Y) if m or y)
    return 1.0 if union == 0 else inter / union


def score(s, mask, Y):
    return (s - iou(mask, Y)) ** 2


def max_abs_diff(a, b):
    if isinstance(a, (list, tuple)):
        return max((max_abs_diff(x, y) for x, y in zip(a, b)), default=0.0)
    return abs(a - b)
