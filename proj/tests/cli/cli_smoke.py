"""End-to-end smoke test of the stackdiff command-line tool.

usage: cli_smoke.py STACKDIFF_BINARY TEST_DATA_DIR WORK_DIR
"""
import json
import pathlib
import shutil
import socket
import subprocess
import sys
import time
import urllib.error
import urllib.request

BIN, DATA, WORK = sys.argv[1], pathlib.Path(sys.argv[2]), pathlib.Path(sys.argv[3])

TINY_MODEL = {
    "in_channels": 12, "base_channels": 4, "multipliers": [1, 2], "blocks_per_scale": 1,
    "attention_scales": [1], "cond_dim": 8, "context_dim": 8, "time_embed_dim": 8,
    "heads": 2, "groups": 2, "init_seed": 3,
}


def run(*args, expect=0):
    proc = subprocess.run([BIN, *map(str, args)], capture_output=True, text=True, timeout=600)
    if proc.returncode != expect:
        sys.exit(f"{' '.join(map(str, args))}: exit {proc.returncode}\n{proc.stdout}\n{proc.stderr}")
    return json.loads(proc.stdout) if expect == 0 and proc.stdout.strip() else proc


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def http(method, url, body=None):
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(url, data=data, method=method, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=120) as r:
            return r.status, r.read()
    except urllib.error.HTTPError as e:
        return e.code, e.read()


def main():
    shutil.rmtree(WORK, ignore_errors=True)
    WORK.mkdir(parents=True)

    config = {
        "synthetic": {"articles": 24, "n_steps": 3},
        "train": {"steps": 4, "batch_size": 2, "N": 3, "T": 20, "learning_rate": 1e-3,
                  "model": TINY_MODEL, "embedders": {"text_encoder": {"kind": "hash", "dim": 8}}},
        "generation": {"sampler": {"steps": 5, "guidance_scale": 2.0}},
    }
    cfg = WORK / "config.json"
    cfg.write_text(json.dumps(config))

    synth = run("corpus", "synth", "--config", cfg, "--out", WORK / "corpus")
    assert synth["articles"] == 24
    stats = run("corpus", "stats", "--data", WORK / "corpus")
    assert stats["counts"] == {"3": 24}, stats
    split = run("corpus", "split", "--data", WORK / "corpus", "--out", WORK / "split", "--ratios", 0.5, 0.25, 0.25)
    assert split["train"] + split["val"] + split["test"] == 24

    trained = run("train", "--config", cfg, "--synthetic", "--out", WORK / "run")
    assert trained["steps"] == 4
    assert (WORK / "run" / "model.ckpt").exists()
    resumed = run("resume", "--config", cfg, "--synthetic", "--checkpoint", WORK / "run" / "model.ckpt",
                  "--out", WORK / "run2", "--steps", 6)
    assert resumed["steps"] == 6

    ref = WORK / "split" / "test"
    gen = run("generate", "--config", cfg, "--checkpoint", WORK / "run" / "model.ckpt", "--from-corpus", ref,
              "--out", WORK / "generated", "--seed", 1)
    assert gen["articles"] == split["test"]
    first = run("evaluate", "--generated", WORK / "generated", "--reference", ref, "--out", WORK / "eval1.json")
    second = run("evaluate", "--generated", WORK / "generated", "--reference", ref)
    assert first == second
    for key in ("gf", "sf", "cic_mean", "fid"):
        assert key in first, first
    self_eval = run("evaluate", "--generated", ref, "--reference", ref)
    assert self_eval["gf"]["accuracy"] == 1.0 and self_eval["sf"]["accuracy"] == 1.0, self_eval
    assert abs(self_eval["fid"]) <= 1e-6

    article = run("generate", "--stub", "--llm", "synthetic", "--input", "make a red circle", "--out",
                  WORK / "article", "--sampler-steps", 3, "--seed", 4)
    assert article["mode"] == "stacked" and len(article["steps"]) >= 1
    assert (WORK / "article" / "index.html").exists()
    retrieved = run("generate", "--stub", "--llm", "synthetic", "--input", "make a red circle", "--mode",
                    "retrieval_goal", "--out", WORK / "retrieved")
    page = run("render-comparison", "--a", WORK / "article", "--b", WORK / "retrieved", "--out", WORK / "cmp.html",
               "--seed", 2)
    assert page["missing_images"] == 0
    assert "<html" in (WORK / "cmp.html").read_text().lower()
    assert retrieved["mode"] == "retrieval_goal"

    # Ten goals, three annotators; seven go to X by 2-of-3, three to Y.
    rows = ["goal_id,annotator_id,choice"]
    for g in range(10):
        votes = ["A", "B", "A"] if g < 7 else ["B", "tie", "B"]
        rows += [f"g{g},a{k},{v}" for k, v in enumerate(votes)]
    (WORK / "ann.csv").write_text("\n".join(rows) + "\n")
    rate = run("win-rate", "--annotations", WORK / "ann.csv", "--method-x", "stacked", "--method-y", "independent")
    assert rate["win_rate"]["stacked"] == 70.0 and rate["win_rate"]["independent"] == 30.0, rate

    bad = run("evaluate", "--generated", WORK / "missing", "--reference", ref, expect=1)
    assert json.loads(bad.stderr.strip().splitlines()[-1])["error"]["kind"]
    run("nonsense", expect=2)

    port = free_port()
    server = subprocess.Popen([BIN, "serve", "--stub", "--port", str(port), "--store", str(WORK / "store")],
                              stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
    try:
        base = f"http://127.0.0.1:{port}/v1"
        for _ in range(200):
            try:
                status, _ = http("GET", base + "/healthz")
                if status == 200:
                    break
            except OSError:
                time.sleep(0.05)
        status, body = http("POST", base + "/articles", {"user_text": "make a blue square", "seed": 5})
        assert status == 200, body
        created = json.loads(body)
        status, body = http("GET", base + "/articles/" + created["id"])
        assert status == 200 and json.loads(body) == created
        status, body = http("POST", base + f"/sessions/{created['session_id']}/follow_up", {"user_text": "make it red"})
        assert status == 200, body
        status, body = http("GET", base + "/sessions/" + created["session_id"])
        assert status == 200 and len(json.loads(body)["turns"]) == 2
        status, _ = http("GET", base + "/articles/art-missing")
        assert status == 404
    finally:
        server.terminate()
        server.wait(timeout=30)
    print("cli smoke: ok")


if __name__ == "__main__":
    main()
