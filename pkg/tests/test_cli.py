import json

import pytest

from stkg_activity import cli
from stkg_activity.community import InvariantError
from stkg_activity.ingest import GridConfig, read_record_batch

OUTPUTS = [
    "stays.jsonl",
    "stays_grid.jsonl",
    "stays_dbscan.jsonl",
    "locations_stkg.jsonl",
    "locations_grid.jsonl",
    "locations_dbscan.jsonl",
    "metrics.csv",
    "per_user.jsonl",
]


def run(*argv):
    return cli.main([str(a) for a in argv])


def lines(path):
    return path.read_text().splitlines()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert run("synth", "--seed", 11, "--users", 10, "--days", 7, "--out-dir", d) == 0
    return d


@pytest.fixture(scope="module")
def full_run(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("all")
    argv = ["all", "--input", corpus / "records.csv", "--truth", corpus / "truth.jsonl", "--out", out, "--workers", 1]
    assert run(*argv) == 0
    return out, argv


def test_all_writes_outputs(full_run):
    out, _ = full_run
    for name in OUTPUTS + ["run_summary.json", "run_timings.json"]:
        assert (out / name).is_file(), name
    assert not (out / "trace.jsonl").exists()
    assert not list(out.glob(".*.tmp"))
    assert lines(out / "metrics.csv")[0] == "method,metric,value"


def test_all_deterministic_across_workers(full_run, tmp_path):
    out, argv = full_run
    argv = list(argv)
    argv[argv.index("--out") + 1] = tmp_path
    argv[-1] = 2
    assert run(*argv, "--batch-size", 3) == 0
    for name in OUTPUTS + ["run_summary.json"]:
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_counters_match_line_counts(full_run, corpus):
    out, _ = full_run
    s = json.loads((out / "run_summary.json").read_text())
    assert set(cli.COUNTERS) <= set(s)
    assert s["users"] == 10 == len(lines(corpus / "truth.jsonl"))
    assert s["records_read"] == len(lines(corpus / "records.csv")) - 1
    assert s["records_skipped"] == 0
    assert s["stays"] == len(lines(out / "stays.jsonl"))
    assert s["communities"] == len(lines(out / "locations_stkg.jsonl"))
    assert s["locations_grid"] == len(lines(out / "locations_grid.jsonl"))
    assert s["locations_dbscan"] == len(lines(out / "locations_dbscan.jsonl"))
    assert len(lines(out / "per_user.jsonl")) == 3 * s["users"]


def test_outputs_sorted_by_uid(full_run):
    out, _ = full_run
    for name in OUTPUTS:
        if name.endswith(".jsonl"):
            uids = [json.loads(l)["uid"] for l in lines(out / name)]
            assert uids == sorted(uids), name


def test_each_stay_in_one_location(full_run):
    out, _ = full_run
    for method, stays_file in (("stkg", "stays.jsonl"), ("grid", "stays_grid.jsonl"), ("dbscan", "stays_dbscan.jsonl")):
        expected = sorted((d["uid"], d["stay_id"]) for d in map(json.loads, lines(out / stays_file)))
        got = sorted((d["uid"], i) for d in map(json.loads, lines(out / f"locations_{method}.jsonl")) for i in d["stay_ids"])
        assert got == expected, method


def test_stage_chain_matches_all(corpus, full_run, tmp_path):
    out, _ = full_run
    rec, truth = corpus / "records.csv", corpus / "truth.jsonl"
    assert run("preprocess", "--input", rec, "--out", tmp_path) == 0
    assert run("stays", "--input", tmp_path / "trace.jsonl", "--out", tmp_path) == 0
    assert run("detect", "--input", tmp_path / "stays.jsonl", "--out", tmp_path) == 0
    assert run("baseline", "--input", tmp_path / "trace.jsonl", "--out", tmp_path) == 0
    assert run("evaluate", "--dir", tmp_path, "--truth", truth, "--records", rec) == 0
    for name in OUTPUTS:
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name
    staged = json.loads((tmp_path / "run_summary.json").read_text())
    whole = json.loads((out / "run_summary.json").read_text())
    assert staged == whole


def test_stkg_writes_triples(full_run, tmp_path):
    out, _ = full_run
    assert run("stkg", "--input", out / "stays.jsonl", "--out", tmp_path) == 0
    triples = [json.loads(l) for l in lines(tmp_path / "triples.jsonl")]
    assert triples and not list(tmp_path.glob(".*.tmp"))


def test_write_trace_flag(corpus, tmp_path):
    assert run("all", "--input", corpus / "records.csv", "--out", tmp_path, "--workers", 1, "--write-trace") == 0
    assert (tmp_path / "trace.jsonl").stat().st_size > 0


def test_synthesized_all_matches_file_input(corpus, tmp_path):
    # without --input the same corpus is generated in memory
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("all", "--seed", 11, "--users", 10, "--days", 7, "--out", a, "--workers", 1) == 0
    assert run("all", "--input", corpus / "records.csv", "--truth", corpus / "truth.jsonl", "--out", b,
               "--workers", 1) == 0
    for name in OUTPUTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_empty_input(tmp_path):
    rec = tmp_path / "records.csv"
    rec.write_text("Uid,Timestamp,Longitude,Latitude\n")
    assert run("all", "--input", rec, "--out", tmp_path / "out", "--workers", 1) == 0
    s = json.loads((tmp_path / "out" / "run_summary.json").read_text())
    assert all(s[k] == 0 for k in cli.COUNTERS)
    assert (tmp_path / "out" / "stays.jsonl").read_text() == ""


def test_corrupted_fixture_skip_count(corpus, tmp_path):
    good = lines(corpus / "records.csv")
    bad = [
        "u9,notatime,121.1,31.1",
        "u9,1559347200,,31.1",
        "u9,1559347200,abc,31.1",
        "u9,1559347200,121.1",
        ",1559347200,121.1,31.1",
        "u9,1559347200,121.1,95.0",
    ]
    body = good[:50] + bad + good[50:]
    rec = tmp_path / "records.csv"
    rec.write_text("\n".join(body) + "\n")
    assert read_record_batch(rec, GridConfig()).skipped == len(bad)
    assert run("preprocess", "--input", rec, "--out", tmp_path / "p") == 0
    s = json.loads((tmp_path / "p" / "run_summary.json").read_text())
    assert s["records_skipped"] == len(bad)
    assert s["records_read"] == len(good) - 1
    assert run("all", "--input", rec, "--out", tmp_path / "a", "--workers", 1) == 0
    assert json.loads((tmp_path / "a" / "run_summary.json").read_text())["records_skipped"] == len(bad)


def test_missing_stays_file(tmp_path, capsys):
    assert run("detect", "--input", tmp_path / "stays.jsonl", "--out", tmp_path) == 1
    assert "stays file not found" in capsys.readouterr().err


def test_bad_flags_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        run("all", "--out", tmp_path, "--no-such-flag")
    assert e.value.code == 1
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        run("frobnicate")
    assert e.value.code == 1
    assert run("all", "--out", tmp_path, "--workers", 0) == 1
    assert run("all", "--out", tmp_path, "--users", 0) == 1


def test_invariant_violation_exit_two(monkeypatch, tmp_path, capsys):
    def boom(a, cfg):
        raise InvariantError("dq mismatch")

    monkeypatch.setitem(cli.COMMANDS, "detect", boom)
    assert run("detect", "--input", tmp_path / "x", "--out", tmp_path) == 2
    assert "invariant" in capsys.readouterr().err


def test_max_gap_flag(corpus, tmp_path):
    assert run("preprocess", "--input", corpus / "records.csv", "--out", tmp_path) == 0
    assert run("stays", "--input", tmp_path / "trace.jsonl", "--out", tmp_path / "a", "--max-gap-slots", "unlimited") == 0
    assert run("stays", "--input", tmp_path / "trace.jsonl", "--out", tmp_path / "b", "--max-gap-slots", 1) == 0
    assert len(lines(tmp_path / "b" / "stays.jsonl")) >= len(lines(tmp_path / "a" / "stays.jsonl"))
    with pytest.raises(SystemExit):
        run("stays", "--input", tmp_path / "trace.jsonl", "--out", tmp_path, "--max-gap-slots", "lots")
