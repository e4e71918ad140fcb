"""Scenario replay, engine determinism, and the command line surface."""

import json
import os

import numpy as np
import pytest
import torch

from faceflow import cli
from faceflow.audio import write_waveform
from faceflow.checkpoint import save_checkpoint
from faceflow.engine import (
    EngineConfig,
    StreamingEngine,
    build_model,
    format_bench,
    load_model_config,
    plan_schedule,
    run_bench,
    run_scenario,
    write_outputs,
)
from faceflow.errors import ConfigError, ScenarioError
from faceflow.microtask import micro_model_config
from faceflow.model import ModelConfig
from faceflow.motion import LISTEN, SPEAK, read_trace, write_trace
from faceflow.scenario import (
    Scenario,
    ScenarioEvent,
    load_scenario,
    parse_scenario,
    synth_samples,
)
from faceflow.scheduler import expand_rle
from faceflow.training import FaceFlowModel

WINDOW_MS = 1000  # micro config: 25 frames at 40 ms


def scenario_doc(events, duration_ms=None):
    doc = {"events": events}
    if duration_ms is not None:
        doc["duration_ms"] = duration_ms
    return json.dumps(doc)


def synth_event(at_ms, source, kind="tone", dur_ms=1000, freq_hz=220.0):
    audio = {"synth": kind, "dur_ms": dur_ms}
    if kind == "tone":
        audio["freq_hz"] = freq_hz
    return {"at_ms": at_ms, "source": source, "audio": audio}


@pytest.fixture(scope="module")
def micro_engine():
    config = EngineConfig(model=micro_model_config(), steps=2, seed=1)
    return build_model(config), config


# ---------------------------------------------------------------------------
# scenario parsing


def test_parse_scenario_structure():
    text = scenario_doc([
        synth_event(0, "mic", kind="noise"),
        synth_event(1000, "llm", dur_ms=2000),
    ])
    sc = parse_scenario(text)
    assert len(sc.events) == 2
    assert [ev.source for ev in sc.events] == ["mic", "llm"]
    assert sc.events[0].samples.size == 16000
    assert sc.events[1].end_ms == 3000
    assert sc.horizon_ms == 3000
    assert sc.duration_ms is None


def test_synth_tone_frequency():
    tone = synth_samples("tone", 1000, freq_hz=100.0)
    crossings = int(np.sum(tone[:-1] * tone[1:] < 0))
    assert abs(crossings - 200) <= 2
    assert np.max(np.abs(tone)) <= 0.5 + 1e-12


def test_synth_silence_and_seeded_noise():
    assert not np.any(synth_samples("silence", 100))
    a = synth_samples("noise", 100, seed=4)
    b = synth_samples("noise", 100, seed=4)
    c = synth_samples("noise", 100, seed=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.max(np.abs(a)) <= 1.0


def test_synth_validation():
    with pytest.raises(ValueError, match="unknown synth kind"):
        synth_samples("chirp", 100)
    with pytest.raises(ValueError, match="positive"):
        synth_samples("tone", 0, freq_hz=100.0)
    with pytest.raises(ValueError, match="freq_hz"):
        synth_samples("tone", 100)


def test_event_audio_from_file(tmp_path):
    wave = 0.25 * np.sin(np.linspace(0, 40 * np.pi, 8000))
    write_waveform(tmp_path / "clip.ffau", wave)
    text = scenario_doc([{"at_ms": 0, "source": "mic", "audio": "clip.ffau"}])
    sc = parse_scenario(text, base_dir=str(tmp_path))
    assert np.allclose(sc.events[0].samples, wave)
    assert sc.events[0].dur_ms == 500

    (tmp_path / "s.json").write_text(text)
    sc2 = load_scenario(tmp_path / "s.json")
    assert np.allclose(sc2.events[0].samples, wave)


def test_scenario_error_carries_line():
    with pytest.raises(ScenarioError, match="line 3") as err:
        parse_scenario('{\n  "events": [\n    {"at_ms" 0}\n  ]\n}')
    assert err.value.line == 3


def test_scenario_error_carries_event_index():
    cases = [
        ({"at_ms": 0, "source": "phone", "audio": {"synth": "silence", "dur_ms": 10}},
         "source"),
        ({"at_ms": -5, "source": "mic", "audio": {"synth": "silence", "dur_ms": 10}},
         "nonnegative"),
        ({"at_ms": True, "source": "mic", "audio": {"synth": "silence", "dur_ms": 10}},
         "integer"),
        ({"at_ms": 0, "source": "mic", "audio": {"synth": "noise", "dur_ms": 10,
                                                 "freq_hz": 100.0}}, "freq_hz"),
        ({"at_ms": 0, "source": "mic", "audio": {"synth": "tone", "dur_ms": 10}},
         "freq_hz"),
        ({"at_ms": 0, "source": "mic", "audio": 7}, "file path or a synth"),
        ({"at_ms": 0, "source": "mic", "audio": "no/such/file.ffau"}, "cannot read"),
        ({"at_ms": 0, "source": "mic", "audio": {"synth": "silence", "dur_ms": 10},
          "volume": 1}, "unknown event keys"),
        ({"source": "mic", "audio": {"synth": "silence", "dur_ms": 10}}, "at_ms"),
    ]
    for i, (event, match) in enumerate(cases):
        good = synth_event(0, "mic", kind="silence", dur_ms=10)
        with pytest.raises(ScenarioError, match=match) as err:
            parse_scenario(scenario_doc([good, event]))
        assert err.value.event == 1, f"case {i}"


def test_scenario_rejects_unordered_and_empty():
    with pytest.raises(ScenarioError, match="ordered"):
        parse_scenario(scenario_doc([synth_event(500, "mic", kind="silence", dur_ms=10),
                                     synth_event(0, "mic", kind="silence", dur_ms=10)]))
    with pytest.raises(ScenarioError, match="no events"):
        parse_scenario(scenario_doc([]))
    parse_scenario(scenario_doc([], duration_ms=1000))
    with pytest.raises(ScenarioError, match="unknown scenario keys"):
        parse_scenario('{"events": [], "loop": true}')
    with pytest.raises(ScenarioError, match="positive"):
        parse_scenario(scenario_doc([synth_event(0, "mic", dur_ms=10)], duration_ms=0))


# ---------------------------------------------------------------------------
# tick planning


def test_plan_ingests_before_simultaneous_tick():
    sc = parse_scenario(scenario_doc([
        synth_event(0, "mic", kind="noise"),
        synth_event(1000, "llm", dur_ms=1000),
    ]))
    steps = plan_schedule(sc, 25)
    kinds = [(s.time_ms, s.kind) for s in steps]
    assert kinds == [(0, "ingest"), (1000, "ingest"), (1000, "tick"), (2000, "tick")]


def test_plan_covers_explicit_duration():
    sc = parse_scenario(scenario_doc([synth_event(0, "mic", dur_ms=100)],
                                     duration_ms=2500))
    ticks = [s for s in plan_schedule(sc, 25) if s.kind == "tick"]
    assert len(ticks) == 3
    assert [s.time_ms for s in ticks] == [1000, 2000, 3000]


def test_plan_drains_late_speech():
    # speech lands mid-window and outlasts the event horizon ticks
    sc = parse_scenario(scenario_doc([synth_event(900, "llm", dur_ms=3000)]))
    steps = plan_schedule(sc, 25)
    ticks = [s for s in steps if s.kind == "tick"]
    # 75 speaking frames arrive at 900 ms; horizon ticks at 1s..4s already
    # drain them (25 each from the second tick on)
    assert len(ticks) == 4
    assert ticks[-1].time_ms == 4000


def test_plan_adds_ticks_beyond_horizon_when_needed():
    # all speech arrives up front; the 1-tick horizon must be extended
    sc = Scenario(events=(ScenarioEvent(0, "llm", synth_samples("tone", 3000, 220.0)),))
    ticks = [s for s in plan_schedule(sc, 25) if s.kind == "tick"]
    assert len(ticks) == 3


# ---------------------------------------------------------------------------
# engine replay


def test_engine_config_validation():
    with pytest.raises(ConfigError, match="steps"):
        EngineConfig(steps=0)
    with pytest.raises(ConfigError, match="magnitude_rot"):
        EngineConfig(magnitude_rot=1.5)
    with pytest.raises(ConfigError, match="magnitude_trans"):
        EngineConfig(magnitude_trans=-0.1)
    assert EngineConfig().steps == 4
    assert EngineConfig().magnitude.rot_mag == 0.3


def test_load_model_config(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"window": 25, "history_len": 15,
                                "group_spans": [5, 10], "tokens_per_group": 3,
                                "model_dim": 64, "blocks": 1, "heads": 4}))
    cfg = load_model_config(path)
    assert cfg.window == 25
    assert cfg.group_spans == (5, 10)
    path.write_text(json.dumps({"window": 25, "depth": 3}))
    with pytest.raises(ConfigError, match="unknown model config"):
        load_model_config(path)
    path.write_text(json.dumps({"history_len": 9}))
    with pytest.raises(ConfigError, match="group spans"):
        load_model_config(path)
    path.write_text("{broken")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_model_config(path)


def test_mic_only_scenario_is_all_listening(micro_engine):
    model, config = micro_engine
    sc = parse_scenario(scenario_doc([synth_event(0, "mic", kind="noise", dur_ms=1500)],
                                     duration_ms=2000))
    result = run_scenario(sc, model, config)
    assert result.frames == 50
    assert np.all(result.states == LISTEN)
    assert all(entry["speak_frames_consumed"] == 0 for entry in result.window_log)


def test_llm_utterance_speaks_then_listens(micro_engine):
    # a 2 s utterance fills exactly two speaking windows, then listening
    model, config = micro_engine
    sc = parse_scenario(scenario_doc([synth_event(0, "llm", dur_ms=2000)],
                                     duration_ms=4000))
    result = run_scenario(sc, model, config)
    per_window = result.states.reshape(4, 25)
    assert np.all(per_window[0] == SPEAK)
    assert np.all(per_window[1] == SPEAK)
    assert np.all(per_window[2] == LISTEN)
    assert np.all(per_window[3] == LISTEN)


def test_trace_states_equal_window_log(micro_engine):
    model, config = micro_engine
    sc = parse_scenario(scenario_doc([
        synth_event(0, "mic", kind="noise"),
        synth_event(400, "llm", dur_ms=1300),
    ], duration_ms=3000))
    result = run_scenario(sc, model, config)
    from_log = np.concatenate([expand_rle(e["states"]) for e in result.window_log])
    assert np.array_equal(result.states, from_log)
    consumed = sum(e["speak_frames_consumed"] for e in result.window_log)
    assert consumed == 1300 // 40  # whole frames of the utterance


def test_run_scenario_deterministic_and_thread_invariant(micro_engine):
    model, config = micro_engine
    sc = parse_scenario(scenario_doc([
        synth_event(0, "mic", kind="noise", dur_ms=600),
        synth_event(500, "llm", dur_ms=900, freq_hz=300.0),
        synth_event(1200, "mic", kind="noise", dur_ms=700),
    ], duration_ms=3000))
    baseline = run_scenario(sc, model, config)
    for threads in (0, 1, 2, 5):
        again = run_scenario(sc, model, config, producer_threads=threads)
        assert again.trace_text == baseline.trace_text
        assert again.window_log == baseline.window_log


def test_history_handoff_matches_emitted_frames(micro_engine):
    model, config = micro_engine
    engine = StreamingEngine(model, config)
    hist_len = model.config.history_len
    assert np.all(engine.history_coeffs == 0.0)
    assert np.all(engine.history_states == LISTEN)
    engine.ingest("llm", synth_samples("tone", 1400, freq_hz=220.0))
    emitted = []
    for _ in range(3):
        _window, coeffs = engine.step_window()
        emitted.append(coeffs)
        tail = np.concatenate(emitted)[-hist_len:]
        assert np.array_equal(engine.history_coeffs[-tail.shape[0]:], tail)


def test_write_outputs_round_trip(tmp_path, micro_engine):
    model, config = micro_engine
    sc = parse_scenario(scenario_doc([synth_event(0, "llm", dur_ms=1000)]))
    result = run_scenario(sc, model, config)
    trace_path, log_path = write_outputs(result, tmp_path)
    coeffs, states = read_trace(trace_path)
    assert np.array_equal(coeffs, result.coeffs)
    assert np.array_equal(states, result.states)
    with open(log_path) as f:
        assert json.load(f) == result.window_log


def test_checkpoint_shape_mismatch_diagnostic(tmp_path):
    small = FaceFlowModel(micro_model_config(), seed=0)
    ckpt = tmp_path / "small.ffck"
    save_checkpoint(small, ckpt)
    config = EngineConfig(model=ModelConfig(), checkpoint=str(ckpt))
    with pytest.raises(ConfigError, match="shape"):
        build_model(config)


# ---------------------------------------------------------------------------
# bench


def test_bench_counts_and_report(micro_engine):
    _model, config = micro_engine
    report = run_bench(config, windows=2)
    assert report.windows == 2
    assert report.frames == 50
    assert report.coef_fps > 0
    assert report.e2e_fps <= report.coef_fps
    text = format_bench(report)
    assert "reference system: 900" in text
    assert "reference system: 59" in text


def test_bench_more_steps_cost_more_time():
    base = dict(model=micro_model_config(), seed=0)
    fast = run_bench(EngineConfig(steps=1, **base), windows=3)
    slow = run_bench(EngineConfig(steps=4, **base), windows=3)
    assert fast.coef_seconds < slow.coef_seconds


# ---------------------------------------------------------------------------
# command line


def write_scenario(tmp_path, name="scenario.json"):
    path = tmp_path / name
    path.write_text(scenario_doc([
        synth_event(0, "mic", kind="noise", dur_ms=800),
        synth_event(700, "llm", dur_ms=900),
    ], duration_ms=2000))
    return str(path)


def test_cli_run_writes_outputs(tmp_path, capsys):
    scenario = write_scenario(tmp_path)
    out = str(tmp_path / "out")
    code = cli.main(["run", "--scenario", scenario, "--random-init", "--micro",
                     "--steps", "1", "--seed", "3", "--plot", "--output-dir", out])
    assert code == 0
    assert os.path.exists(os.path.join(out, "trace.csv"))
    assert os.path.exists(os.path.join(out, "window_log.json"))
    assert os.path.exists(os.path.join(out, "motion_overview.png"))
    stdout = capsys.readouterr().out
    assert "windows: 2" in stdout
    assert "frames: 50" in stdout


def test_cli_run_exit_codes(tmp_path, capsys):
    scenario = write_scenario(tmp_path)
    assert cli.main(["run", "--scenario", scenario, "--micro"]) == 2
    assert "checkpoint" in capsys.readouterr().err
    assert cli.main(["run", "--scenario", str(tmp_path / "missing.json"),
                     "--random-init", "--micro"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"events": [{"at_ms": 0, "source": "phone", "audio": {"synth": "silence", "dur_ms": 10}}]}')
    assert cli.main(["run", "--scenario", str(bad), "--random-init", "--micro"]) == 2
    assert "event 0" in capsys.readouterr().err


def test_cli_env_var_sets_output_dir(tmp_path, monkeypatch):
    scenario = write_scenario(tmp_path)
    target = tmp_path / "from_env"
    monkeypatch.setenv("FACEFLOW_OUTPUT_DIR", str(target))
    code = cli.main(["run", "--scenario", scenario, "--random-init", "--micro",
                     "--steps", "1"])
    assert code == 0
    assert (target / "trace.csv").exists()


def test_cli_train_writes_artifacts(tmp_path, capsys):
    out = str(tmp_path / "train")
    code = cli.main(["train", "--steps", "4", "--warmup", "2", "--batch-size", "2",
                     "--conversations", "2", "--windows-per-conversation", "4",
                     "--log-every", "0", "--output-dir", out])
    assert code == 0
    for name in ("model.ffck", "loss.csv", "loss.png"):
        assert os.path.exists(os.path.join(out, name))
    with open(os.path.join(out, "loss.csv")) as f:
        rows = f.read().strip().split("\n")
    assert rows[0].startswith("step,total,")
    assert len(rows) == 5
    assert "checkpoint:" in capsys.readouterr().out


def test_cli_train_config_file_overrides_flags(tmp_path):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"steps": 3, "warmup_steps": 0, "batch_size": 2,
                               "lr": 1e-3}))
    out = str(tmp_path / "train")
    code = cli.main(["train", "--config", str(cfg), "--steps", "50",
                     "--conversations", "2", "--windows-per-conversation", "4",
                     "--log-every", "0", "--output-dir", out])
    assert code == 0
    with open(os.path.join(out, "loss.csv")) as f:
        assert len(f.read().strip().split("\n")) == 4  # header + 3 steps


def test_cli_eval_writes_report_and_figures(tmp_path, capsys):
    rng = np.random.default_rng(0)
    t = 60
    gt = 0.2 * rng.standard_normal((t, 115))
    pred = gt + 0.02 * rng.standard_normal((t, 115))
    states = np.where(rng.uniform(size=t) < 0.5, 1, -1)
    write_trace(tmp_path / "gt.csv", gt, states)
    write_trace(tmp_path / "pred.csv", pred, states)
    out = str(tmp_path / "eval")
    code = cli.main(["eval", "--trace", str(tmp_path / "pred.csv"),
                     "--reference", str(tmp_path / "gt.csv"),
                     "--clusters", "4", "--output-dir", out])
    assert code == 0
    for name in ("report.txt", "metrics.png", "mouth_opening.png"):
        assert os.path.exists(os.path.join(out, name))
    stdout = capsys.readouterr().out
    for key in ("lve:", "fdd:", "mod:", "ba:", "sid:", "psnr:", "ssim:"):
        assert key in stdout
    with open(os.path.join(out, "report.txt")) as f:
        assert f.read() in stdout


def test_cli_eval_length_mismatch(tmp_path, capsys):
    rng = np.random.default_rng(1)
    write_trace(tmp_path / "a.csv", 0.1 * rng.standard_normal((10, 115)), np.ones(10))
    write_trace(tmp_path / "b.csv", 0.1 * rng.standard_normal((12, 115)), np.ones(12))
    code = cli.main(["eval", "--trace", str(tmp_path / "a.csv"),
                     "--reference", str(tmp_path / "b.csv")])
    assert code == 2
    assert "lengths differ" in capsys.readouterr().err


def test_cli_bench_prints_comparison(capsys):
    code = cli.main(["bench", "--micro", "--windows", "1", "--steps", "1"])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "coefficient fps:" in stdout
    assert "reference system: 900" in stdout


def test_cli_gradcheck_pass_and_fail(capsys):
    code = cli.main(["gradcheck", "--per-param", "1"])
    assert code == 0
    assert "gradcheck passed" in capsys.readouterr().out
    code = cli.main(["gradcheck", "--per-param", "1", "--threshold", "1e-12"])
    assert code == 3


def test_cli_default_sampling_steps_is_four():
    parser = cli.build_parser()
    args = parser.parse_args(["run", "--scenario", "x.json", "--random-init"])
    assert args.steps == 4
    args = parser.parse_args(["bench"])
    assert args.steps == 4
