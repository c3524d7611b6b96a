"""
测试黑盒预测接口与远程验证
"""

import socket

import numpy as np
import pytest
from fastapi.testclient import TestClient

from sensiprint import nn, web
from sensiprint.attacks import quantize
from sensiprint.errors import InvalidInput, ServeError, TransportError, VerificationAborted
from sensiprint.fingerprint import OutputSpec, apply_output_spec, build_fingerprint, local_oracle, verify
from sensiprint.web import RemoteOracle, ServeConfig, create_app, remote_oracle, serve, start_service


def _rows(inputs):
    return [[float(v) for v in x.reshape(-1)] for x in inputs]


@pytest.fixture
def client(sigmoid_mlp):
    return TestClient(create_app(sigmoid_mlp, OutputSpec.top_k_prob(2, 3), max_request_inputs=4))


@pytest.fixture
def service(sigmoid_mlp):
    handle = start_service(sigmoid_mlp, OutputSpec.top_k(1))
    yield handle
    handle.stop()


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(('127.0.0.1', 0))
        return s.getsockname()[1]


# ============ 应用 ============

def test_predict_matches_local(client, sigmoid_mlp, unit_inputs):
    """接口输出与本地规范化结果一致"""
    response = client.post('/predict', json={'inputs': _rows(unit_inputs[:3])})
    assert response.status_code == 200
    outputs = response.json()['outputs']
    for x, out in zip(unit_inputs[:3], outputs):
        probs, _ = nn.forward(sigmoid_mlp, x)
        assert out == apply_output_spec(probs, OutputSpec.top_k_prob(2, 3)).to_dict()


def test_predict_deterministic(client, unit_inputs):
    body = {'inputs': _rows(unit_inputs[:2])}
    assert client.post('/predict', json=body).json() == client.post('/predict', json=body).json()


@pytest.mark.parametrize('body,status', [
    ({'inputs': []}, 'invalid_input'),
    ({'x': 1}, 'invalid_input'),
    ({'inputs': [[0.1] * 5]}, 'invalid_shape'),
    ({'inputs': [['a'] * 6]}, 'invalid_input'),
    ({'inputs': [[True] * 6]}, 'invalid_input'),
    ({'inputs': [[0.5] * 6] * 5}, 'too_many_inputs'),
])
def test_predict_rejects(client, body, status):
    response = client.post('/predict', json=body)
    assert response.status_code == 400
    assert response.json()['status'] == status


def test_predict_forward_runs_in_threadpool(monkeypatch, sigmoid_mlp, unit_inputs):
    """前向计算交给线程池, 不阻塞事件循环"""
    calls = []
    real = web.run_in_threadpool

    async def recording(func, *args, **kwargs):
        calls.append(func.__name__)
        return await real(func, *args, **kwargs)

    monkeypatch.setattr(web, 'run_in_threadpool', recording)
    client = TestClient(create_app(sigmoid_mlp, OutputSpec.top_k(1)))
    response = client.post('/predict', json={'inputs': _rows(unit_inputs[:2])})
    assert response.status_code == 200
    assert calls == ['predict_rows']


def test_predict_rejects_non_json(client):
    response = client.post('/predict', content=b'not json', headers={'content-type': 'application/json'})
    assert response.status_code == 400
    assert response.json()['status'] == 'invalid_input'


def test_healthz_hides_digest(client):
    assert client.get('/healthz').json() == {'status': 'ok', 'spec': 'top-2-p-dec-3'}


def test_healthz_exposes_digest(sigmoid_mlp):
    app = create_app(sigmoid_mlp, OutputSpec.top_k(1), expose_digest=True)
    body = TestClient(app).get('/healthz').json()
    assert body['digest'] == nn.digest(sigmoid_mlp).hex


def test_spec_must_fit_model(sigmoid_mlp):
    with pytest.raises(InvalidInput):
        create_app(sigmoid_mlp, OutputSpec.top_k(4))


def test_serve_config():
    cfg = ServeConfig.from_dict({'model_path': 'm.bin', 'spec': 'top-2', 'port': 9000})
    assert cfg.spec == OutputSpec.top_k(2)
    assert cfg.listen_address == '127.0.0.1:9000'
    assert ServeConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidInput):
        ServeConfig('m.bin', port=70000)


def test_serve_missing_model(tmp_path):
    with pytest.raises(ServeError):
        serve(ServeConfig(str(tmp_path / 'absent.bin'), port=0))


# ============ 真实服务 ============

def test_remote_equals_local(service, sigmoid_mlp, unit_inputs):
    remote = remote_oracle(service.url, OutputSpec.top_k(1))
    local = local_oracle(sigmoid_mlp, OutputSpec.top_k(1))
    assert remote.query_many(list(unit_inputs)) == [local(x) for x in unit_inputs]
    assert remote.health()['status'] == 'ok'


def test_verify_over_http(service, sigmoid_mlp, unit_inputs):
    spec = OutputSpec.top_k(1)
    fp = build_fingerprint(sigmoid_mlp, list(unit_inputs), spec)
    report = verify(fp, remote_oracle(service.url, spec))
    assert report.detected is False
    assert report.queries_used == len(unit_inputs)


def test_quantized_service_detected(sigmoid_mlp, unit_inputs):
    """用全部概率输出时, 量化后的服务能被发现"""
    spec = OutputSpec.all_probs(6)
    fp = build_fingerprint(sigmoid_mlp, list(unit_inputs), spec)
    with start_service(quantize(sigmoid_mlp).tampered, spec) as handle:
        report = verify(fp, remote_oracle(handle.url, spec))
    assert report.detected is True


def test_unreachable_endpoint_aborts(sigmoid_mlp, unit_inputs):
    spec = OutputSpec.top_k(1)
    fp = build_fingerprint(sigmoid_mlp, list(unit_inputs[:2]), spec)
    oracle = remote_oracle(f'127.0.0.1:{_free_port()}', spec, timeout=1.0)
    with pytest.raises(VerificationAborted) as exc:
        verify(fp, oracle)
    assert exc.value.partial.detected is None
    with pytest.raises(TransportError):
        oracle.health()


def test_query_many_batches(service, unit_inputs):
    """超过单次上限时自动分批"""
    oracle = RemoteOracle(service.url, OutputSpec.top_k(1), max_request_inputs=3)
    assert len(oracle.query_many(list(unit_inputs))) == len(unit_inputs)


def test_request_log_file(tmp_path, sigmoid_mlp, unit_inputs):
    log_path = tmp_path / 'requests.log'
    with start_service(sigmoid_mlp, OutputSpec.top_k(1), log_path=str(log_path)) as handle:
        remote_oracle(handle.url, OutputSpec.top_k(1))(unit_inputs[0])
    assert 'predict ok: 1 inputs' in log_path.read_text()


def test_stop_releases_port(sigmoid_mlp):
    handle = start_service(sigmoid_mlp, OutputSpec.top_k(1))
    port = handle.port
    assert handle.running
    handle.stop()
    assert not handle.running
    start_service(sigmoid_mlp, OutputSpec.top_k(1), port=port).stop()


@pytest.mark.slow
@pytest.mark.parametrize('label', ['top-1', 'top-3', 'top-2-p-dec-4', 'p-dec-6'])
def test_wire_conformance(mlp_fixture, label):
    """远程接口与本地规范化结果逐条相同, 未篡改模型不报警"""
    spec = OutputSpec.parse(label)
    model = mlp_fixture.model
    rng = np.random.default_rng(5)
    inputs = list(rng.random((250, 8)).astype(np.float32))
    with start_service(model, spec) as handle:
        remote = remote_oracle(handle.url, spec)
        assert remote.query_many(inputs) == [local_oracle(model, spec)(x) for x in inputs]
        fp = build_fingerprint(model, inputs[:10], spec)
        for _ in range(20):
            assert verify(fp, remote).detected is False


@pytest.mark.slow
def test_untampered_never_flagged_over_http():
    """经 HTTP 验证未篡改模型 10,000 次: 零误报"""
    rng = np.random.default_rng(22)
    services = []
    for seed in range(2):
        model = nn.mlp((6,), [8], 4, seed=seed)
        for label in ('top-1', 'top-3', 'top-2-p-dec-4', 'p-dec-6'):
            spec = OutputSpec.parse(label)
            services.append((model, spec, start_service(model, spec)))
    try:
        oracles = [remote_oracle(handle.url, spec) for _, spec, handle in services]
        detections = 0
        for _ in range(10_000):
            i = int(rng.integers(len(services)))
            model, spec, _ = services[i]
            ns = int(rng.integers(1, 6))
            fp = build_fingerprint(model, list(rng.random((ns, 6)).astype(np.float32)), spec)
            detections += verify(fp, oracles[i]).detected
        assert detections == 0
    finally:
        for _, _, handle in services:
            handle.stop()


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
