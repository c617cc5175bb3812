"""End-to-end CLI behavior with replay backends in a temp workspace."""

import json

import pytest

from planrag.cli import main, parse_subset_spec, CliError

CORPUS = [
    {"id": "p1", "title": "Eiffel Tower", "text": "The Eiffel Tower was completed in 1889 in Paris"},
    {"id": "p2", "title": "Berlin", "text": "Berlin is the capital city of Germany"},
    {"id": "p3", "title": "Louvre", "text": "The Louvre museum is located in Paris France"},
    {"id": "p4", "title": "Unification", "text": "The German Empire was proclaimed in 1871"},
]

DATASET = [
    {"id": "q1", "question": "Where is the Eiffel Tower?", "answers": ["Paris"]},
    {"id": "q2", "question": "What is the capital of Germany?", "answers": ["Berlin"]},
    {"id": "q3", "question": "When was the German Empire proclaimed?", "answers": ["1871"]},
]

SCRIPTS = [
    {"id": "q1", "turns": ["[ANSWER] Paris [SOLVED]"]},
    {
        "id": "q2",
        "turns": [
            "[INTERMEDIARY] I should check [RETRIEVE] capital of Germany",
            "[ANSWER] Berlin [SOLVED]",
        ],
    },
    {
        "id": "q3",
        "turns": [
            "[INTERMEDIARY] some empire [RETRIEVE] german empire proclaimed",
            "[INTERMEDIARY] 1871 maybe [RETRIEVE] year german empire proclaimed",
            "[ANSWER] 1871 [SOLVED]",
        ],
    },
]


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return str(path)


@pytest.fixture
def workspace(tmp_path):
    paths = {
        "corpus": write_jsonl(tmp_path / "corpus.jsonl", CORPUS),
        "dataset": write_jsonl(tmp_path / "dataset.jsonl", DATASET),
        "scripts": write_jsonl(tmp_path / "scripts.jsonl", SCRIPTS),
        "index": str(tmp_path / "index.json"),
        "root": tmp_path,
    }
    assert main(["index", "--corpus", paths["corpus"], "--out", paths["index"]]) == 0
    return paths


class TestIndexCmd:
    def test_summary(self, workspace, capsys):
        code = main(["index", "--corpus", workspace["corpus"], "--out", workspace["index"]])
        assert code == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["doc_count"] == 4

    def test_rebuild_identical(self, workspace, capsys):
        main(["index", "--corpus", workspace["corpus"], "--out", workspace["index"]])
        first = capsys.readouterr().out
        main(["index", "--corpus", workspace["corpus"], "--out", workspace["index"]])
        assert capsys.readouterr().out == first

    def test_missing_corpus(self, tmp_path, capsys):
        code = main(["index", "--corpus", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "i.json")])
        assert code == 1
        assert "error:" in capsys.readouterr().err


def run_cmd(workspace, out_name, extra=()):
    out_dir = workspace["root"] / out_name
    code = main(
        [
            "run",
            "--dataset", workspace["dataset"],
            "--index", workspace["index"],
            "--scripts", workspace["scripts"],
            "--out-dir", str(out_dir),
            *extra,
        ]
    )
    return code, out_dir


class TestRunCmd:
    def test_outputs(self, workspace):
        code, out_dir = run_cmd(workspace, "run1")
        assert code == 0
        transcripts = [
            json.loads(line)
            for line in (out_dir / "transcripts.jsonl").read_text().splitlines()
        ]
        assert [t["id"] for t in transcripts] == ["q1", "q2", "q3"]
        assert [t["rounds_used"] for t in transcripts] == [0, 1, 2]
        assert transcripts[2]["final_answer"] == "1871"
        report = json.loads((out_dir / "report.json").read_text())
        assert report["report"]["rows"][0]["em"] == 1.0
        assert report["report"]["presence_at_k"]["1"] > 0
        table = (out_dir / "report.txt").read_text()
        assert "Avg.Score" in table

    def test_deterministic_across_runs_and_parallelism(self, workspace):
        outputs = []
        for name, extra in (
            ("d1", []), ("d2", []), ("d3", []),
            ("p4", ["--parallelism", "4"]),
        ):
            code, out_dir = run_cmd(workspace, name, extra)
            assert code == 0
            outputs.append(
                (out_dir / "transcripts.jsonl").read_bytes()
                + (out_dir / "report.json").read_bytes()
                + (out_dir / "report.txt").read_bytes()
            )
        assert len(set(outputs)) == 1

    def test_empty_dataset(self, workspace, tmp_path):
        empty = write_jsonl(tmp_path / "empty.jsonl", [])
        out_dir = workspace["root"] / "empty-run"
        code = main(
            ["run", "--dataset", empty, "--scripts", workspace["scripts"],
             "--out-dir", str(out_dir)]
        )
        assert code == 0
        report = json.loads((out_dir / "report.json").read_text())
        assert report["report"]["rows"] == []

    def test_missing_scripts_and_backend(self, workspace, capsys):
        out_dir = workspace["root"] / "nogen"
        code = main(
            ["run", "--dataset", workspace["dataset"], "--out-dir", str(out_dir)]
        )
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_failed_episode_sets_exit_code(self, workspace, tmp_path):
        bad_scripts = write_jsonl(
            tmp_path / "bad.jsonl",
            [{"id": r["id"], "turns": []} for r in DATASET],
        )
        out_dir = workspace["root"] / "failing"
        code = main(
            ["run", "--dataset", workspace["dataset"], "--scripts", bad_scripts,
             "--index", workspace["index"], "--out-dir", str(out_dir)]
        )
        assert code == 1
        transcripts = [
            json.loads(line)
            for line in (out_dir / "transcripts.jsonl").read_text().splitlines()
        ]
        assert all(t["status"] == "generator_failure" for t in transcripts)

    def test_config_file_and_flag_precedence(self, workspace, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"budget": 1, "top_k": 2}))
        out_dir = workspace["root"] / "cfg"
        code = main(
            ["run", "--dataset", workspace["dataset"], "--scripts", workspace["scripts"],
             "--index", workspace["index"], "--out-dir", str(out_dir),
             "--config", str(config), "--budget", "3"]
        )
        assert code == 0
        report = json.loads((out_dir / "report.json").read_text())
        assert report["run"]["budget"] == 3  # flag wins
        assert report["run"]["top_k"] == 2  # config wins over default


class TestSweepCmd:
    def test_budget_sweep_counts(self, workspace, tmp_path):
        # scripts retrieve four times before answering on the fifth turn;
        # an extra answer turn covers the repair re-prompt at small budgets
        retrieve = "[INTERMEDIARY] more [RETRIEVE] eiffel paris"
        sweep_scripts = write_jsonl(
            tmp_path / "sweep_scripts.jsonl",
            [
                {"id": r["id"], "turns": [retrieve] * 4 + ["[ANSWER] Paris [SOLVED]"] * 2}
                for r in DATASET
            ],
        )
        out_dir = workspace["root"] / "sweep"
        code = main(
            ["sweep", "--dataset", workspace["dataset"], "--scripts", sweep_scripts,
             "--index", workspace["index"], "--out-dir", str(out_dir),
             "--budgets", "3,5"]
        )
        assert code == 0
        sweep = json.loads((out_dir / "sweep.json").read_text())
        by_budget = {row["budget"]: row for row in sweep["budgets"]}
        assert by_budget[3]["mean_count"] == pytest.approx(3.0)
        assert by_budget[5]["mean_count"] == pytest.approx(4.0)
        for row in sweep["budgets"]:
            assert all(int(k) <= row["budget"] for k in row["distribution"])
        assert (out_dir / "b3" / "transcripts.jsonl").exists()
        assert (out_dir / "sweep.txt").exists()

    def test_zero_budget(self, workspace, tmp_path):
        scripts = write_jsonl(
            tmp_path / "zb.jsonl",
            [{"id": r["id"], "turns": ["[ANSWER] Paris [SOLVED]"]} for r in DATASET],
        )
        out_dir = workspace["root"] / "sweep0"
        code = main(
            ["sweep", "--dataset", workspace["dataset"], "--scripts", scripts,
             "--out-dir", str(out_dir), "--budgets", "0"]
        )
        assert code == 0
        sweep = json.loads((out_dir / "sweep.json").read_text())
        assert sweep["budgets"][0]["mean_count"] == 0.0


def synth_transcripts(tmp_path, name, rounds, answers):
    rows = [
        {"id": f"q{i}", "rounds_used": r, "final_answer": a, "status": "completed"}
        for i, (r, a) in enumerate(zip(rounds, answers))
    ]
    return write_jsonl(tmp_path / name, rows)


class TestCompareCmd:
    def make_pair(self, tmp_path):
        refs = [
            {"id": f"q{i}", "question": f"q {i}", "answers": ["gold"]} for i in range(10)
        ]
        dataset = write_jsonl(tmp_path / "refs.jsonl", refs)
        # A retrieves >=1 on ids 0..4; B retrieves 0 on ids 0,1,2,7,8,9
        a = synth_transcripts(
            tmp_path, "a.jsonl",
            [1, 2, 1, 1, 3, 0, 0, 0, 0, 0],
            ["gold"] * 10,
        )
        b = synth_transcripts(
            tmp_path, "b.jsonl",
            [0, 0, 0, 1, 1, 1, 1, 0, 0, 0],
            ["gold"] * 5 + ["wrong"] * 5,
        )
        return dataset, a, b

    def test_fraction(self, tmp_path, capsys):
        dataset, a, b = self.make_pair(tmp_path)
        out = tmp_path / "compare.json"
        code = main(
            ["compare", "--a", a, "--b", b, "--dataset", dataset,
             "--subset", "a>=1,b==0", "--out", str(out)]
        )
        assert code == 0
        result = json.loads(out.read_text())
        assert result["matched"] == 3 and result["fraction"] == pytest.approx(0.30)
        assert result["A"]["em"] == 1.0

    def test_id_mismatch(self, tmp_path, capsys):
        dataset, a, _ = self.make_pair(tmp_path)
        other = synth_transcripts(tmp_path, "other.jsonl", [0], ["x"])
        code = main(
            ["compare", "--a", a, "--b", other, "--dataset", dataset,
             "--subset", "a>=1,b==0"]
        )
        assert code == 1
        assert "mismatch" in capsys.readouterr().err

    def test_empty_subset(self, tmp_path):
        dataset, a, b = self.make_pair(tmp_path)
        out = tmp_path / "empty.json"
        code = main(
            ["compare", "--a", a, "--b", b, "--dataset", dataset,
             "--subset", "a>=9,b>=9", "--out", str(out)]
        )
        assert code == 0
        result = json.loads(out.read_text())
        assert result["fraction"] == 0.0 and result["A"] is None

    def test_subset_spec_parsing(self):
        atoms = parse_subset_spec("a>=1, b==0")
        assert atoms == [("a", ">=", 1), ("b", "==", 0)]
        with pytest.raises(CliError):
            parse_subset_spec("c>1")


SUPERVISE_QUESTIONS = [
    {"id": "s1", "question": "alpha question", "answers": ["paris"]},
    {"id": "s2", "question": "beta question", "answers": ["berlin"]},
    {"id": "s3", "question": "gamma question", "answers": ["vienna"]},
    {"id": "s4", "question": "theta question", "answers": ["rome"]},
]

SUPERVISE_SCRIPTS = [
    # probe turns: two parametric attempts then one retrieval-probe attempt
    {"id": "s1", "probe_turns": ["paris", "paris", "paris"], "teacher_turns": []},
    {"id": "s2", "probe_turns": ["probably berlin today", "nope", "berlin"], "teacher_turns": []},
    {"id": "s3", "probe_turns": ["no idea", "none", "still wrong"],
     "teacher_turns": ["where is the gamma entity located"]},
    {"id": "s4", "probe_turns": ["wrong", "wrong", "rome area mostly"], "teacher_turns": []},
]


class TestSuperviseCmd:
    def run_supervise(self, tmp_path, scripts, out_name="sup"):
        questions = write_jsonl(tmp_path / "questions.jsonl", SUPERVISE_QUESTIONS)
        scripts_path = write_jsonl(tmp_path / "probe_scripts.jsonl", scripts)
        out_dir = tmp_path / out_name
        code = main(
            ["supervise", "--questions", questions, "--scripts", scripts_path,
             "--out-dir", str(out_dir), "--attempts", "2"]
        )
        return code, out_dir

    def test_one_of_each_kind(self, tmp_path, capsys):
        code, out_dir = self.run_supervise(tmp_path, SUPERVISE_SCRIPTS)
        assert code == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["counts"] == {"alpha": 1, "beta": 1, "gamma": 1, "theta": 1}
        lines = (out_dir / "sft.jsonl").read_text().splitlines()
        assert len(lines) == 4

    def test_teacher_unreachable_skips_gamma(self, tmp_path, capsys):
        scripts = [dict(s) for s in SUPERVISE_SCRIPTS]
        scripts[2] = {"id": "s3", "probe_turns": ["no idea", "none", "still wrong"],
                      "teacher_turns": []}
        code, out_dir = self.run_supervise(tmp_path, scripts, "sup2")
        assert code == 0
        captured = capsys.readouterr()
        assert "skipping s3" in captured.err
        summary = json.loads(captured.out.strip().splitlines()[-1])
        assert summary["skipped"] == 1
        assert summary["counts"]["gamma"] == 0

    def test_rerun_identical(self, tmp_path):
        _, out1 = self.run_supervise(tmp_path, SUPERVISE_SCRIPTS, "supA")
        _, out2 = self.run_supervise(tmp_path, SUPERVISE_SCRIPTS, "supB")
        assert (out1 / "sft.jsonl").read_bytes() == (out2 / "sft.jsonl").read_bytes()


class TestRewardCmd:
    def make_samples(self, tmp_path):
        samples = [
            {"id": "r1", "question": "q", "kind": "alpha",
             "target": "[ANSWER] paris [SOLVED]", "references": ["paris"]},
            {"id": "r2", "question": "q", "kind": "alpha",
             "target": "[ANSWER] berlin [SOLVED]", "references": ["berlin"]},
        ]
        return write_jsonl(tmp_path / "samples.jsonl", samples)

    def test_perfect_rollouts(self, tmp_path):
        samples = self.make_samples(tmp_path)
        rollouts = write_jsonl(
            tmp_path / "rollouts.jsonl",
            [{"id": "r1", "text": "[ANSWER] paris [SOLVED]"},
             {"id": "r2", "text": "[ANSWER] berlin [SOLVED]"}],
        )
        out = tmp_path / "rewards.jsonl"
        assert main(["reward", "--rollouts", rollouts, "--samples", samples,
                     "--out", str(out)]) == 0
        entries = [json.loads(line) for line in out.read_text().splitlines()]
        assert all(e["total"] == pytest.approx(1.5) for e in entries)

    def test_malformed_line_isolated(self, tmp_path):
        samples = self.make_samples(tmp_path)
        rollouts = tmp_path / "rollouts.jsonl"
        rollouts.write_text(
            '{"id": "r1", "text": "[ANSWER] paris [SOLVED]"}\n'
            "this is not json\n"
            '{"id": "r2", "text": "[SOLVED]"}\n'
        )
        out = tmp_path / "rewards.jsonl"
        assert main(["reward", "--rollouts", str(rollouts), "--samples", samples,
                     "--out", str(out)]) == 1
        entries = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(entries) == 3
        assert "error" in entries[1]
        assert entries[2]["r_ctrl"] == -0.5

    def test_empty_rollouts(self, tmp_path):
        samples = self.make_samples(tmp_path)
        rollouts = tmp_path / "rollouts.jsonl"
        rollouts.write_text("")
        out = tmp_path / "rewards.jsonl"
        assert main(["reward", "--rollouts", str(rollouts), "--samples", samples,
                     "--out", str(out)]) == 0
        assert out.read_text() == ""


class TestScoreCmd:
    def test_score_predictions(self, tmp_path, capsys):
        dataset = write_jsonl(tmp_path / "refs.jsonl", DATASET)
        preds = write_jsonl(
            tmp_path / "preds.jsonl",
            [{"id": "q1", "prediction": "Paris"},
             {"id": "q2", "prediction": "munich"},
             {"id": "q3", "prediction": "1871"}],
        )
        code = main(["score", "--predictions", preds, "--dataset", dataset, "--name", "toy"])
        assert code == 0
        out = capsys.readouterr().out
        assert "toy" in out and "66.7" in out  # EM 2/3

    def test_missing_prediction(self, tmp_path, capsys):
        dataset = write_jsonl(tmp_path / "refs.jsonl", DATASET)
        preds = write_jsonl(tmp_path / "preds.jsonl", [{"id": "q1", "prediction": "x"}])
        assert main(["score", "--predictions", preds, "--dataset", dataset]) == 1
