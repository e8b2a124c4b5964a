import numpy as np
import pytest

import stackdiff as sd


def test_tile_untile_round_trip():
    rng = np.random.default_rng(0)
    steps = [rng.normal(size=(12, 6, 6)) for _ in range(3)]
    stack = sd.tile(steps)
    assert stack.shape == (12, 18, 6)
    assert np.array_equal(stack[:, 6:12], steps[1])
    for a, b in zip(sd.untile(stack, 3), steps):
        assert np.array_equal(a, b)
    with pytest.raises(sd.Error):
        sd.untile(stack, 4)


def test_codec_round_trip_on_block_constant_images():
    rng = np.random.default_rng(1)
    cells = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
    image = np.repeat(np.repeat(cells, 4, axis=0), 4, axis=1)
    latent = sd.codec_encode(image)
    assert latent.shape == (12, 6, 6)
    assert np.array_equal(sd.codec_decode(latent), image)
    exact = sd.codec_encode(image, kind="patch", spatial_reduction=4, pool=1)
    assert exact.shape == (48, 12, 12)
    assert np.array_equal(sd.codec_decode(exact, kind="patch", spatial_reduction=4, pool=1), image)


def test_schedule_and_guidance():
    ab = np.array(sd.alpha_bar("linear", 1000, True))
    assert ab[-1] == 0.0
    assert np.all(np.diff(ab) < 0)
    assert sd.alpha_bar("linear", 1000, False)[-1] > 0.0
    u, c = np.zeros((2, 3)), np.ones((2, 3))
    assert np.allclose(sd.cfg_combine(u, c, 3.0), 3.0)
    assert np.array_equal(sd.cfg_combine(u, c, 1.0), c)


def test_conditioning_structure():
    rows, segments = sd.condition_texts("red circle", ["one", "two", "three"], dim=8)
    assert rows.shape[1] == 8
    assert segments[0] == 0 and sorted(set(segments)) == [0, 1, 2, 3]
    plain, same = sd.condition_texts("red circle", ["one", "two", "three"], dim=8, positional=False)
    assert same == segments
    code = np.array(sd.step_positional_code(2, 8))
    assert np.allclose(rows - plain, np.array([sd.step_positional_code(s, 8) for s in segments]))
    assert np.allclose(code[0::2], np.sin(2 * 10000.0 ** (-np.arange(4) * 2 / 8)))


def test_metrics():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(64, 4))
    assert abs(sd.fid(x, x)) < 1e-9
    assert sd.fid(x, x + 1.0) == pytest.approx(4.0, abs=1e-6)
    eye = np.eye(2)
    assert sd.frechet_distance(np.zeros(2), eye, np.ones(2), eye) == pytest.approx(2.0)
    a = np.ones((3, 2))
    b = np.array([[0.0, 0.0], [2.0, 0.0]])
    assert sd.cross_image_consistency([a, b]) == pytest.approx(1.0)

    ann = [(f"g{g}", f"a{k}", v) for g in range(10) for k, v in enumerate("AAA" if g < 7 else "BBB")]
    report = sd.win_rate(ann, "x", "y", {f"g{g}": "x" for g in range(10)})
    assert report["win_rate"] == {"x": 70.0, "y": 30.0}


def test_plan_text():
    prompt = sd.render_prompt("How do I make a paper boat?")
    assert "How do I make a paper boat?" in prompt
    assert sd.prompt_template().count("{") >= 1
    plan = sd.parse_plan("Goal: Make a boat\n1. Fold the paper\n2. Open the hat\n")
    assert plan["goal"] == "Make a boat"
    assert plan["steps"] == ["Fold the paper", "Open the hat"]
    assert sd.parse_plan(sd.format_plan(plan["goal"], plan["steps"]))["steps"] == plan["steps"]
    with pytest.raises(sd.Error):
        sd.parse_plan("no plan here")


def test_synthetic_corpus_and_evaluate(tmp_path):
    arts = sd.synthetic_corpus(articles=4, n_steps=3, seed=5)
    assert len(arts) == 4
    assert all(len(a["steps"]) == 3 and len(a["images"]) == 3 for a in arts)
    assert arts[0]["images"][0].shape == (48, 48, 3)
    assert sd.synthetic_corpus(articles=4, n_steps=3, seed=5)[0]["goal"] == arts[0]["goal"]

    sd.write_synthetic_corpus(str(tmp_path / "c"), articles=6, seed=1)
    report = sd.evaluate(str(tmp_path / "c"), str(tmp_path / "c"))
    assert report["gf"]["accuracy"] == 1.0 and report["sf"]["accuracy"] == 1.0
    assert abs(report["fid"]) <= 1e-6


def test_tiny_training_run(tmp_path):
    config = {
        "synthetic": {"articles": 12, "n_steps": 3},
        "train": {
            "steps": 3, "batch_size": 2, "N": 3, "T": 20, "learning_rate": 1e-3,
            "model": {"in_channels": 12, "base_channels": 4, "multipliers": [1, 2], "blocks_per_scale": 1,
                      "attention_scales": [1], "cond_dim": 8, "context_dim": 8, "time_embed_dim": 8,
                      "heads": 2, "groups": 2, "init_seed": 3},
            "embedders": {"text_encoder": {"kind": "hash", "dim": 8}},
        },
    }
    out = sd.train_synthetic(config, str(tmp_path / "run"))
    assert out["steps"] == 3 and len(out["losses"]) == 3
    assert all(np.isfinite(out["losses"]))
    assert (tmp_path / "run" / "model.ckpt").exists()
    again = sd.train_synthetic(config, str(tmp_path / "run2"))
    assert again["losses"] == out["losses"]


def test_stub_generation_is_reproducible():
    a = sd.generate_stub("make a red circle", seed=3, sampler_steps=3)
    b = sd.generate_stub("make a red circle", seed=3, sampler_steps=3)
    assert a["mode"] == "stacked" and a["steps"]
    assert len(a["images"]) == len(a["steps"])
    for x, y in zip(a["images"], b["images"]):
        assert np.array_equal(x, y)


def test_stub_service(tmp_path):
    svc = sd.StubService(str(tmp_path / "store"), sampler_steps=3)
    status, health = svc.healthz()
    assert status == 200 and health["api"] == "v1"
    status, art = svc.create_article({"user_text": "make a blue square", "seed": 2})
    assert status == 200 and art["turn"] == 0
    assert svc.get_article(art["id"]) == (200, art)
    status, nxt = svc.follow_up(art["session_id"], {"user_text": "make it red"})
    assert status == 200 and nxt["turn"] == 1
    status, session = svc.get_session(art["session_id"])
    assert [t["article_id"] for t in session["turns"]] == [art["id"], nxt["id"]]
    status, err = svc.get_article("art-missing")
    assert status == 404 and err["error"]["kind"] == "not_found"
    assert svc.create_article({})[0] == 400
