from __future__ import annotations

import json
import threading

import pytest
from fastapi.testclient import TestClient

from admitqa.config import EngineConfig
from admitqa.service import (
    EngineRuntime,
    InteractionRecord,
    ModelPrice,
    PriceSheet,
    RecordLog,
    create_app,
    daily_rollup,
    estimate_cost,
    nearest_rank_percentile,
)

ADMIN = {"Authorization": "Bearer test-admin-token"}


@pytest.fixture(scope="module")
def runtime(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("service-data")
    config = EngineConfig(admin_token="test-admin-token", data_dir=str(data_dir))
    return EngineRuntime(config)


@pytest.fixture(scope="module")
def client(runtime):
    return TestClient(create_app(runtime))


def record(
    rid: int,
    ts: float = 1754784000.0,  # 2025-08-10 UTC
    input_tokens: int = 100,
    output_tokens: int = 10,
    verdict: str | None = None,
    total_ms: float = 50.0,
) -> InteractionRecord:
    return InteractionRecord(
        record_id=f"rec-{rid:08d}",
        session_id="s",
        turn_index=1,
        timestamp=ts,
        question="q",
        answer="a",
        agent="info_search",
        query_type="keyword_lookup",
        citations=[],
        input_tokens=input_tokens,
        output_tokens=output_tokens,
        first_token_ms=10.0,
        total_ms=total_ms,
        verdict=verdict,
    )


class TestCostEstimator:
    def test_one_million_input_tokens(self):
        sheet = PriceSheet({"m": ModelPrice(0.15, 0.60)})
        assert estimate_cost([record(1, input_tokens=1_000_000, output_tokens=0)], sheet, "m") == 0.15

    def test_zero_tokens(self):
        sheet = PriceSheet({"m": ModelPrice(0.15, 0.60)})
        assert estimate_cost([record(1, input_tokens=0, output_tokens=0)], sheet, "m") == 0.0

    def test_two_week_deployment_scale(self):
        # 6079 messages at 1748 in / 60 out average tokens
        sheet = PriceSheet({"m": ModelPrice(0.15, 0.60)})
        records = [record(1, input_tokens=10_630_000, output_tokens=365_000)]
        assert estimate_cost(records, sheet, "m") == 1.81

    def test_missing_model(self):
        with pytest.raises(KeyError):
            estimate_cost([], PriceSheet({}), "nope")

    def test_additive_over_partitions(self):
        sheet = PriceSheet({"m": ModelPrice(1.0, 2.0)})
        records = [record(i, input_tokens=123_456, output_tokens=7_890) for i in range(10)]
        whole = estimate_cost(records, sheet, "m")
        parts = estimate_cost(records[:4], sheet, "m") + estimate_cost(records[4:], sheet, "m")
        assert whole == pytest.approx(parts, abs=0.011)  # cent rounding per partition


class TestDailyRollup:
    def test_empty_day(self):
        metrics = daily_rollup([], "2025-08-10")
        assert metrics.questions == 0
        assert metrics.accuracy is None

    def test_accuracy_ratio(self):
        records = [record(i, verdict="correct") for i in range(9)]
        records.append(record(99, verdict="incorrect"))
        metrics = daily_rollup(records, "2025-08-10")
        assert metrics.questions == 10
        assert metrics.accuracy == 0.9

    def test_unrated_excluded_from_accuracy(self):
        records = [record(1, verdict="correct"), record(2), record(3)]
        assert daily_rollup(records, "2025-08-10").accuracy == 1.0

    def test_day_boundary_utc(self):
        in_day = record(1, ts=1754784000.0)       # 2025-08-10 00:00
        before = record(2, ts=1754783999.0)       # 2025-08-09 23:59:59
        metrics = daily_rollup([in_day, before], "2025-08-10")
        assert metrics.questions == 1

    def test_percentiles_nearest_rank(self):
        values = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0]
        assert nearest_rank_percentile(values, 50) == 50.0
        assert nearest_rank_percentile(values, 95) == 100.0
        assert nearest_rank_percentile([5.0], 95) == 5.0

    def test_token_sums(self):
        records = [record(1, input_tokens=7, output_tokens=3), record(2, input_tokens=5, output_tokens=2)]
        metrics = daily_rollup(records, "2025-08-10")
        assert metrics.input_tokens == 12
        assert metrics.output_tokens == 5


class TestRecordLog:
    def test_append_and_replay(self, tmp_path):
        path = tmp_path / "records.jsonl"
        log = RecordLog(path)
        rid = log.next_record_id()
        log.append(record(int(rid.split("-")[1])))
        log.set_verdict(rid, "correct", rater="officer-1")
        replayed = RecordLog(path)
        assert replayed.get(rid).verdict == "correct"
        assert replayed.get(rid).rater == "officer-1"
        assert replayed.next_record_id() != rid

    def test_verdict_transitions(self, tmp_path):
        log = RecordLog(tmp_path / "r.jsonl")
        rid = log.next_record_id()
        log.append(record(1))
        log.set_verdict(rid, "incorrect", None)
        log.set_verdict(rid, "correct", None)  # rated-to-rated allowed
        assert log.get(rid).verdict == "correct"
        with pytest.raises(ValueError):
            log.set_verdict(rid, "maybe", None)

    def test_concurrent_appends_atomic(self, tmp_path):
        log = RecordLog(tmp_path / "r.jsonl")

        def add(n):
            for _ in range(25):
                rid = log.next_record_id()
                log.append(record(int(rid.split("-")[1])))

        threads = [threading.Thread(target=add, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        lines = (tmp_path / "r.jsonl").read_text().splitlines()
        assert len(lines) == 100
        ids = [json.loads(l)["record_id"] for l in lines]
        assert len(set(ids)) == 100


class TestApi:
    def test_health(self, client):
        body = client.get("/v1/health").json()
        assert body["status"] == "ok"
        assert body["units"] == 124

    def test_create_and_message_non_streaming(self, client):
        session_id = client.post("/v1/sessions").json()["session_id"]
        response = client.post(
            f"/v1/sessions/{session_id}/messages",
            params={"stream": "false"},
            json={"text": "học phí ngành công nghệ thông tin là bao nhiêu?"},
        )
        assert response.status_code == 200
        body = response.json()
        assert body["citations"], "expected a cited answer"
        assert not body["refused"]
        assert body["usage"]["output_tokens"] >= 1
        assert body["record_id"].startswith("rec-")

    def test_streaming_events_in_order(self, client, runtime):
        session_id = client.post("/v1/sessions").json()["session_id"]
        with client.stream(
            "POST",
            f"/v1/sessions/{session_id}/messages",
            json={"text": "ký túc xá giá bao nhiêu một tháng?"},
        ) as response:
            assert response.status_code == 200
            assert response.headers["content-type"].startswith("text/event-stream")
            raw = "".join(response.iter_text())
        events = []
        for block in raw.strip().split("\n\n"):
            lines = dict(
                line.split(": ", 1) for line in block.splitlines() if ": " in line
            )
            events.append((lines["event"], json.loads(lines["data"])))
        kinds = [k for k, _ in events]
        assert kinds[-1] == "done"
        assert "token" in kinds
        token_text = "".join(d["text"] for k, d in events if k == "token")
        done = events[-1][1]
        record = runtime.records.get(done["record_id"])
        assert token_text == record.answer
        citation_ids = [d["unit_id"] for k, d in events if k == "citation"]
        assert citation_ids == record.citations
        # tokens all arrive before the done event
        assert kinds.index("done") > max(i for i, k in enumerate(kinds) if k == "token")

    def test_one_record_per_answered_message(self, client, runtime):
        before = len(runtime.records.all_records())
        session_id = client.post("/v1/sessions").json()["session_id"]
        client.post(
            f"/v1/sessions/{session_id}/messages",
            params={"stream": "false"},
            json={"text": "thư viện mở cửa lúc mấy giờ?"},
        )
        assert len(runtime.records.all_records()) == before + 1

    def test_unknown_session_404(self, client):
        response = client.post(
            "/v1/sessions/does-not-exist/messages", json={"text": "hi"}
        )
        assert response.status_code == 404

    def test_empty_text_400(self, client):
        session_id = client.post("/v1/sessions").json()["session_id"]
        response = client.post(f"/v1/sessions/{session_id}/messages", json={"text": "  "})
        assert response.status_code == 400

    def test_verdict_flow_updates_accuracy(self, client):
        session_id = client.post("/v1/sessions").json()["session_id"]
        body = client.post(
            f"/v1/sessions/{session_id}/messages",
            params={"stream": "false"},
            json={"text": "mã ngành công nghệ thông tin là gì?"},
        ).json()
        rate = client.post(
            f"/v1/records/{body['record_id']}/verdict",
            json={"verdict": "correct", "rater": "officer-1"},
            headers=ADMIN,
        )
        assert rate.status_code == 200
        from datetime import datetime, timezone

        today = datetime.now(timezone.utc).strftime("%Y-%m-%d")
        days = client.get(
            "/v1/metrics/daily", params={"from": today, "to": today}
        ).json()["days"]
        assert days[0]["questions"] >= 1
        assert days[0]["accuracy"] is not None and 0.0 <= days[0]["accuracy"] <= 1.0

    def test_verdict_requires_admin_token(self, client):
        response = client.post("/v1/records/rec-00000001/verdict", json={"verdict": "correct"})
        assert response.status_code == 401

    def test_verdict_unknown_record_404(self, client):
        response = client.post(
            "/v1/records/rec-99999999/verdict", json={"verdict": "correct"}, headers=ADMIN
        )
        assert response.status_code == 404

    def test_bad_verdict_value_400(self, client, runtime):
        rid = runtime.records.all_records()[0].record_id
        response = client.post(
            f"/v1/records/{rid}/verdict", json={"verdict": "meh"}, headers=ADMIN
        )
        assert response.status_code == 400

    def test_cost_endpoint(self, client):
        body = client.get("/v1/metrics/cost", params={"model": "gpt-4o-mini"}).json()
        assert body["model"] == "gpt-4o-mini"
        assert body["cost"] >= 0.0

    def test_cost_unknown_model_400(self, client):
        assert client.get("/v1/metrics/cost", params={"model": "gpt-99"}).status_code == 400

    def test_metrics_bad_dates_400(self, client):
        assert (
            client.get("/v1/metrics/daily", params={"from": "nope", "to": "2025-08-10"}).status_code
            == 400
        )

    def test_units_endpoint(self, client):
        body = client.get("/v1/units/FAQ-0001").json()
        assert body["unit_id"] == "FAQ-0001"
        assert "354.000" in body["text"]
        assert client.get("/v1/units/DOC-9999").status_code == 404

    def test_records_listing_admin(self, client):
        assert client.get("/v1/records").status_code == 401
        body = client.get("/v1/records", headers=ADMIN).json()
        assert isinstance(body["records"], list) and body["records"]

    def test_single_record_refetch(self, client, runtime):
        rid = runtime.records.all_records()[0].record_id
        body = client.get(f"/v1/records/{rid}").json()
        assert body["record_id"] == rid and body["answer"]
        assert client.get("/v1/records/rec-99999999").status_code == 404

    def test_admin_ingest_and_exclusivity(self, client, runtime):
        response = client.post("/v1/admin/ingest", headers=ADMIN)
        assert response.status_code == 200
        assert response.json()["report"]["chunks_out"] == 44

        # hold the lock to simulate a running ingest
        assert runtime._ingest_lock.acquire(blocking=False)
        try:
            busy = client.post("/v1/admin/ingest", headers=ADMIN)
            assert busy.status_code == 409
        finally:
            runtime._ingest_lock.release()

    def test_provider_outage_returns_503_retryable(self, client, runtime, monkeypatch):
        from admitqa.generate import ProviderError

        def broken_route(query, session):
            raise ProviderError("backend unreachable")

        monkeypatch.setattr(runtime.router, "route", broken_route)
        session_id = client.post("/v1/sessions").json()["session_id"]
        response = client.post(
            f"/v1/sessions/{session_id}/messages",
            params={"stream": "false"},
            json={"text": "học phí?"},
        )
        assert response.status_code == 503
        assert response.json()["detail"]["retryable"] is True

    def test_session_context_carries_across_turns(self, client, runtime):
        session_id = client.post("/v1/sessions").json()["session_id"]
        client.post(
            f"/v1/sessions/{session_id}/messages",
            params={"stream": "false"},
            json={"text": "quê tôi ở Quảng Trị"},
        )
        body = client.post(
            f"/v1/sessions/{session_id}/messages",
            params={"stream": "false"},
            json={"text": "tôi được 23 điểm học bạ, đối tượng 2, tổng điểm xét tuyển là bao nhiêu?"},
        ).json()
        assert body["agent"] == "score_calc"
        assert not body["needs_clarification"]
        assert "24.63" in body["answer"]
