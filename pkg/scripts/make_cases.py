"""Regenerate the bundled JSON case files from the standard test-system tables."""

import json
from pathlib import Path

DATA = Path(__file__).resolve().parents[1] / "src" / "gridlinf" / "data"

# machine constants common to all bundled cases (typical values; droop in Hz/pu)
DYN = {"M": 0.2, "D": 0.0, "tau_d": 5.0, "x_d": 0.7, "x_d_prime": 0.07,
       "x_q": 0.5, "T_ch": 0.2, "R_droop": 0.02}


def case9():
    branches = [
        (1, 4, 0.0, 0.0576, 0.0),
        (4, 5, 0.017, 0.092, 0.158),
        (5, 6, 0.039, 0.17, 0.358),
        (3, 6, 0.0, 0.0586, 0.0),
        (6, 7, 0.0119, 0.1008, 0.209),
        (7, 8, 0.0085, 0.072, 0.149),
        (8, 2, 0.0, 0.0625, 0.0),
        (8, 9, 0.032, 0.161, 0.306),
        (9, 4, 0.01, 0.085, 0.176),
    ]
    gens = [  # bus, dispatch_p (pu), setpoint_v
        (1, 0.0, 1.04),     # slack
        (2, 1.63, 1.025),
        (3, 0.85, 1.025),
    ]
    loads = [(5, 0.90, 0.30), (7, 1.00, 0.35), (9, 1.25, 0.50)]
    return {
        "name": "case9",
        "base_mva": 100.0,
        "base_freq_hz": 60.0,
        "slack_bus": 1,
        "buses": [{"id": i} for i in range(1, 10)],
        "branches": [dict(zip(("from", "to", "r", "x", "b"), br)) for br in branches],
        "generators": [dict(bus=b, dispatch_p=p, setpoint_v=v, **DYN) for b, p, v in gens],
        "loads": [{"bus": b, "p": p, "q": q} for b, p, q in loads],
        "renewables": [],
    }


def case39():
    # New England 10-machine system (from, to, r, x, b, tap; tap 0 = line)
    branches = [
        (1, 2, 0.0035, 0.0411, 0.6987, 0.0), (1, 39, 0.0010, 0.0250, 0.7500, 0.0),
        (2, 3, 0.0013, 0.0151, 0.2572, 0.0), (2, 25, 0.0070, 0.0086, 0.1460, 0.0),
        (2, 30, 0.0000, 0.0181, 0.0000, 1.025), (3, 4, 0.0013, 0.0213, 0.2214, 0.0),
        (3, 18, 0.0011, 0.0133, 0.2138, 0.0), (4, 5, 0.0008, 0.0128, 0.1342, 0.0),
        (4, 14, 0.0008, 0.0129, 0.1382, 0.0), (5, 6, 0.0002, 0.0026, 0.0434, 0.0),
        (5, 8, 0.0008, 0.0112, 0.1476, 0.0), (6, 7, 0.0006, 0.0092, 0.1130, 0.0),
        (6, 11, 0.0007, 0.0082, 0.1389, 0.0), (6, 31, 0.0000, 0.0250, 0.0000, 1.070),
        (7, 8, 0.0004, 0.0046, 0.0780, 0.0), (8, 9, 0.0023, 0.0363, 0.3804, 0.0),
        (9, 39, 0.0010, 0.0250, 1.2000, 0.0), (10, 11, 0.0004, 0.0043, 0.0729, 0.0),
        (10, 13, 0.0004, 0.0043, 0.0729, 0.0), (10, 32, 0.0000, 0.0200, 0.0000, 1.070),
        (12, 11, 0.0016, 0.0435, 0.0000, 1.006), (12, 13, 0.0016, 0.0435, 0.0000, 1.006),
        (13, 14, 0.0009, 0.0101, 0.1723, 0.0), (14, 15, 0.0018, 0.0217, 0.3660, 0.0),
        (15, 16, 0.0009, 0.0094, 0.1710, 0.0), (16, 17, 0.0007, 0.0089, 0.1342, 0.0),
        (16, 19, 0.0016, 0.0195, 0.3040, 0.0), (16, 21, 0.0008, 0.0135, 0.2548, 0.0),
        (16, 24, 0.0003, 0.0059, 0.0680, 0.0), (17, 18, 0.0007, 0.0082, 0.1319, 0.0),
        (17, 27, 0.0013, 0.0173, 0.3216, 0.0), (19, 20, 0.0007, 0.0138, 0.0000, 1.060),
        (19, 33, 0.0007, 0.0142, 0.0000, 1.070), (20, 34, 0.0009, 0.0180, 0.0000, 1.009),
        (21, 22, 0.0008, 0.0140, 0.2565, 0.0), (22, 23, 0.0006, 0.0096, 0.1846, 0.0),
        (22, 35, 0.0000, 0.0143, 0.0000, 1.025), (23, 24, 0.0022, 0.0350, 0.3610, 0.0),
        (23, 36, 0.0005, 0.0272, 0.0000, 1.000), (25, 26, 0.0032, 0.0323, 0.5130, 0.0),
        (25, 37, 0.0006, 0.0232, 0.0000, 1.025), (26, 27, 0.0014, 0.0147, 0.2396, 0.0),
        (26, 28, 0.0043, 0.0474, 0.7802, 0.0), (26, 29, 0.0057, 0.0625, 1.0290, 0.0),
        (28, 29, 0.0014, 0.0151, 0.2490, 0.0), (29, 38, 0.0008, 0.0156, 0.0000, 1.025),
    ]
    gens = [  # bus, dispatch_p (pu), setpoint_v
        (30, 2.50, 1.0499), (31, 0.0, 0.9820), (32, 6.50, 0.9841),
        (33, 6.32, 0.9972), (34, 5.08, 1.0123), (35, 6.50, 1.0494),
        (36, 5.60, 1.0636), (37, 5.40, 1.0275), (38, 8.30, 1.0265),
        (39, 10.00, 1.0300),
    ]
    loads = [  # bus, p, q (pu)
        (1, 0.976, 0.442), (3, 3.22, 0.024), (4, 5.00, 1.84), (7, 2.338, 0.84),
        (8, 5.22, 1.766), (9, 0.065, -0.666), (12, 0.0853, 0.88), (15, 3.20, 1.53),
        (16, 3.29, 0.323), (18, 1.58, 0.30), (20, 6.80, 1.03), (21, 2.74, 1.15),
        (23, 2.475, 0.846), (24, 3.086, -0.922), (25, 2.24, 0.472), (26, 1.39, 0.17),
        (27, 2.81, 0.755), (28, 2.06, 0.276), (29, 2.835, 0.269), (31, 0.092, 0.046),
        (39, 11.04, 2.50),
    ]
    doc = {
        "name": "case39",
        "base_mva": 100.0,
        "base_freq_hz": 60.0,
        "slack_bus": 31,
        "buses": [{"id": i} for i in range(1, 40)],
        "branches": [],
        "generators": [dict(bus=b, dispatch_p=p, setpoint_v=v, **DYN) for b, p, v in gens],
        "loads": [{"bus": b, "p": p, "q": q} for b, p, q in loads],
        "renewables": [],
    }
    for f, t, r, x, b, tap in branches:
        br = {"from": f, "to": t, "r": r, "x": x, "b": b}
        if tap:
            br["tap"] = tap
        doc["branches"].append(br)
    return doc


if __name__ == "__main__":
    for builder in (case9, case39):
        doc = builder()
        out = DATA / f"{doc['name']}.json"
        out.write_text(json.dumps(doc, indent=1) + "\n")
        total_p = sum(l["p"] for l in doc["loads"])
        total_q = sum(l["q"] for l in doc["loads"])
        print(f"{doc['name']}: N={len(doc['buses'])} G={len(doc['generators'])} "
              f"load={total_p:.4f}+j{total_q:.4f} pu -> {out}")
