"""Smoke test for the trajrec extension module.

Build and install it first:

    pip install --no-build-isolation ./crates/py

Run with `python python/smoke_test.py` or under pytest. Uses the toy
corpus in data/toy when a corpus directory has been built from it.
"""

import json
import os
import subprocess
import tempfile
from fractions import Fraction

import trajrec

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

TRAJECTORY = """<plan>
<think>Profile first, then history.</think>
<JSON>[{"agent_name": "User_Profile_Summary", "task": "summarize"}]</JSON>
</plan>
<user_profile>
<think>Look at a similar book.</think>
<tool_call>{"name": "ItemCF", "arguments": {"item_id": "b1"}}</tool_call>
<tool_response>{"result": "readers of b1 also read b2"}</tool_response>
<JSON>{"summary": "likes series"}</JSON>
</user_profile>
<reflection>
<think>Consistent.</think>
<JSON>{"correct": "yes"}</JSON>
</reflection>
<recommend>
1. b2
2. b3
3. b1
</recommend>"""


def test_codec_and_rewards():
    parsed = trajrec.parse_trajectory(TRAJECTORY)
    assert [s["tag"] for s in parsed["sections"]] == ["plan", "user_profile", "reflection", "recommend"]
    assert parsed["sections"][1]["tool_calls"] == 1
    assert parsed["ranking"] == ["b2", "b3", "b1"]

    assert trajrec.format_reward(TRAJECTORY) == 1
    assert trajrec.outcome_reward(["b2", "b3", "b1"], "b3") == Fraction(2, 3)
    r_fmt, r_out, total = trajrec.composite_reward(TRAJECTORY, "b1")
    assert (r_fmt, r_out, total) == (1, Fraction(2, 3), Fraction(5, 3))
    assert trajrec.format_reward("<recommend>1. b2") == -1

    try:
        trajrec.parse_trajectory("<plan><recommend>1. a</plan></recommend>")
    except ValueError:
        pass
    else:
        raise AssertionError("misnested tags accepted")

    assert trajrec.outcome_filter([(TRAJECTORY, "b2"), (TRAJECTORY, "b3"), ("junk", "b2")]) == [0]


def test_buckets_and_quotas():
    assert [trajrec.bucket(c) for c in range(9)] == [
        None, "hard", "hard", "medium", "medium", "medium", "easy", "easy", None,
    ]
    assert trajrec.quotas(500) == [150, 200, 150]


def test_evaluate():
    gt = "g"
    first = [gt] + [f"x{i}" for i in range(19)]
    fourth = [f"x{i}" for i in range(3)] + [gt] + [f"x{i}" for i in range(3, 19)]
    report = trajrec.evaluate([(first, gt), (fourth, gt)])
    assert report["per_k"] == {"1": 0.5, "3": 0.5, "5": 1.0}
    assert abs(report["hr_avg"] - 2 / 3) < 1e-12


def test_graph():
    g = trajrec.InteractionGraph([("u1", "a"), ("u1", "b"), ("u2", "a"), ("u2", "b"), ("u3", "a"), ("u3", "c")])
    assert g.edge_count() == 6
    assert g.item_cf("a", 5) == [("b", 2), ("c", 1)]
    assert g.user_cf("u1", 1) == [("u2", 2)]
    assert g.neighbor_item_pool("u1", 5) == [("c", 1)]


def test_toy_corpus():
    toy = os.path.join(ROOT, "data", "toy")
    with tempfile.TemporaryDirectory() as tmp:
        corpus = os.path.join(tmp, "corpus")
        cli = os.path.join(ROOT, "target", "debug", "trajrec")
        if not os.path.exists(cli):
            return
        subprocess.run(
            [cli, "ingest", "--users", f"{toy}/users.jsonl", "--items", f"{toy}/items.jsonl",
             "--reviews", f"{toy}/reviews.jsonl", "--out", corpus],
            check=True, capture_output=True,
        )
        instances = trajrec.build_instances(corpus, "classic", 7)
        assert len(instances) == 30
        for inst in instances:
            assert len(inst["candidates"]) == 20 and inst["ground_truth"] in inst["candidates"]
        graph = trajrec.InteractionGraph.from_corpus(corpus)
        assert graph.edge_count() == 404


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_"):
            fn()
            print("ok", name)
    print(json.dumps({"module": trajrec.__name__}))
