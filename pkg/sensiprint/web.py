"""
Sensiprint Web - 黑盒预测接口
POST /predict 只返回输出规格允许的字段; GET /healthz 健康检查。
另含 ServiceHandle (后台 uvicorn) 与 RemoteOracle (requests 客户端)。
"""

import logging
import math
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence
from urllib.parse import urlparse

import numpy as np
import requests
import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from sensiprint import __version__, nn
from sensiprint.errors import InvalidInput, ServeError, SensiprintError, TransportError
from sensiprint.fingerprint import ObservedOutput, OutputSpec, apply_output_spec
from sensiprint.nn import Model

logger = logging.getLogger(__name__)
request_log = logging.getLogger('sensiprint.web.requests')

DEFAULT_PORT = 8000
DEFAULT_TIMEOUT = 10.0
STARTUP_TIMEOUT = 10.0


@dataclass(frozen=True)
class ServeConfig:
    """服务配置: 单模型单规格"""
    model_path: str
    spec: OutputSpec = field(default_factory=lambda: OutputSpec.top_k(1))
    host: str = '127.0.0.1'
    port: int = DEFAULT_PORT
    max_request_inputs: int = 16
    log_path: Optional[str] = None
    expose_digest: bool = False

    def __post_init__(self):
        if not 0 <= self.port <= 65535:
            raise InvalidInput(f"port {self.port} out of range")
        if self.max_request_inputs < 1:
            raise InvalidInput("max_request_inputs must be >= 1")

    @property
    def listen_address(self) -> str:
        return f"{self.host}:{self.port}"

    def to_dict(self) -> dict:
        return {'model_path': self.model_path, 'spec': self.spec.to_dict(), 'host': self.host,
                'port': self.port, 'max_request_inputs': self.max_request_inputs,
                'log_path': self.log_path, 'expose_digest': self.expose_digest}

    @classmethod
    def from_dict(cls, d: dict) -> 'ServeConfig':
        d = dict(d)
        if 'spec' in d:
            spec = d['spec']
            d['spec'] = OutputSpec.parse(spec) if isinstance(spec, str) else OutputSpec.from_dict(spec)
        return cls(**d)


def _error(status: str, detail: str) -> JSONResponse:
    return JSONResponse(status_code=400, content={'status': status, 'detail': detail})


def _is_real(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


# ============ 应用 ============

def create_app(model: Model, spec: OutputSpec, max_request_inputs: int = 16,
               expose_digest: bool = False) -> FastAPI:
    """构建预测接口应用"""
    if spec.has_labels and spec.k > model.num_classes:
        raise InvalidInput(f"spec {spec.label} asks for more labels than the model's {model.num_classes} classes")
    size = int(np.prod(model.input_shape))
    model_digest = nn.digest(model).hex if expose_digest else None

    app = FastAPI(title="Sensiprint", version=__version__)

    @app.get("/healthz")
    def healthz():
        """健康检查"""
        body = {'status': 'ok', 'spec': spec.label}
        if model_digest is not None:
            body['digest'] = model_digest
        return body

    def predict_rows(inputs: List[list]) -> List[dict]:
        outputs = []
        for row in inputs:
            x = np.asarray(row, dtype=np.float32).reshape(model.input_shape)
            probs, _ = nn.forward(model, x)
            outputs.append(apply_output_spec(probs, spec).to_dict())
        return outputs

    @app.post("/predict")
    async def predict(request: Request):
        """按输出规格返回每个输入的预测 (前向计算在线程池中执行)"""
        try:
            body = await request.json()
        except ValueError:
            request_log.info("predict rejected: body is not JSON")
            return _error('invalid_input', 'request body is not JSON')

        inputs = body.get('inputs') if isinstance(body, dict) else None
        if not isinstance(inputs, list) or not inputs:
            request_log.info("predict rejected: no inputs")
            return _error('invalid_input', 'expected {"inputs": [[real, ...], ...]}')
        if len(inputs) > max_request_inputs:
            request_log.info("predict rejected: %d inputs", len(inputs))
            return _error('too_many_inputs', f'at most {max_request_inputs} inputs per request')

        for i, row in enumerate(inputs):
            if not isinstance(row, list) or not all(_is_real(v) for v in row):
                request_log.info("predict rejected: input %d malformed", i)
                return _error('invalid_input', f'input {i} must be a flat list of finite reals')
            if len(row) != size:
                request_log.info("predict rejected: input %d has %d values", i, len(row))
                return _error('invalid_shape', f'input {i} has {len(row)} values, model expects {size}')

        outputs = await run_in_threadpool(predict_rows, inputs)
        request_log.info("predict ok: %d inputs", len(inputs))
        return {'outputs': outputs}

    return app


# ============ 服务 ============

def _attach_log_file(path: str) -> logging.Handler:
    handler = logging.FileHandler(path)
    handler.setFormatter(logging.Formatter('%(asctime)s %(message)s'))
    request_log.addHandler(handler)
    request_log.setLevel(logging.INFO)
    return handler


class ServiceHandle:
    """后台运行的预测服务"""

    def __init__(self, server: uvicorn.Server, thread: threading.Thread, sock: socket.socket,
                 log_handler: Optional[logging.Handler] = None):
        self._server = server
        self._thread = thread
        self._sock = sock
        self._log_handler = log_handler
        self.host, self.port = sock.getsockname()[:2]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    @property
    def running(self) -> bool:
        return self._thread.is_alive()

    def wait(self) -> None:
        """阻塞直到服务退出"""
        self._thread.join()

    def stop(self, timeout: float = 5.0) -> None:
        """停止服务并释放端口"""
        self._server.should_exit = True
        self._thread.join(timeout)
        self._sock.close()
        if self._log_handler is not None:
            request_log.removeHandler(self._log_handler)
            self._log_handler.close()
            self._log_handler = None
        logger.info("service at %s stopped", self.url)

    def __enter__(self) -> 'ServiceHandle':
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def _bind(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError as e:
        sock.close()
        raise ServeError(f"cannot bind {host}:{port}: {e}")
    sock.listen(128)
    sock.set_inheritable(True)
    return sock


def start_service(model: Model, spec: OutputSpec, host: str = '127.0.0.1', port: int = 0,
                  max_request_inputs: int = 16, log_path: Optional[str] = None,
                  expose_digest: bool = False) -> ServiceHandle:
    """在后台线程中启动服务, port=0 时由系统分配端口"""
    app = create_app(model, spec, max_request_inputs, expose_digest)
    sock = _bind(host, port)
    server = uvicorn.Server(uvicorn.Config(app, log_level='warning', access_log=False))
    thread = threading.Thread(target=server.run, kwargs={'sockets': [sock]}, daemon=True)
    handler = _attach_log_file(log_path) if log_path else None
    thread.start()

    deadline = time.monotonic() + STARTUP_TIMEOUT
    while not server.started:
        if not thread.is_alive() or time.monotonic() > deadline:
            server.should_exit = True
            sock.close()
            if handler is not None:
                request_log.removeHandler(handler)
                handler.close()
            raise ServeError(f"service on {host}:{port} failed to start")
        time.sleep(0.01)

    handle = ServiceHandle(server, thread, sock, handler)
    logger.info("serving %s at %s", spec.label, handle.url)
    return handle


def serve(cfg: ServeConfig) -> ServiceHandle:
    """加载模型文件并启动服务"""
    try:
        model = nn.load_model(cfg.model_path)
    except (OSError, SensiprintError) as e:
        raise ServeError(f"cannot load model {cfg.model_path}: {e}")
    try:
        return start_service(model, cfg.spec, cfg.host, cfg.port, cfg.max_request_inputs,
                             cfg.log_path, cfg.expose_digest)
    except InvalidInput as e:
        raise ServeError(str(e))


# ============ 客户端 ============

def _normalize_endpoint(endpoint: str) -> str:
    if '://' not in endpoint:
        endpoint = 'http://' + endpoint
    parsed = urlparse(endpoint)
    if not parsed.hostname:
        raise InvalidInput(f"bad endpoint {endpoint!r}")
    return endpoint.rstrip('/')


class RemoteOracle:
    """把 HTTP 预测接口适配为 verify 可用的黑盒函数"""
    concurrency_safe = False

    def __init__(self, endpoint: str, spec: OutputSpec, timeout: float = DEFAULT_TIMEOUT,
                 max_request_inputs: int = 16, session: Optional[requests.Session] = None):
        self.endpoint = _normalize_endpoint(endpoint)
        self.spec = spec
        self.timeout = timeout
        self.max_request_inputs = max_request_inputs
        self.session = session or requests.Session()

    def _post(self, rows: List[List[float]]) -> List[ObservedOutput]:
        url = self.endpoint + '/predict'
        try:
            response = self.session.post(url, json={'inputs': rows}, timeout=self.timeout)
        except requests.RequestException as e:
            raise TransportError(f"request to {url} failed: {e}")
        if response.status_code != 200:
            raise TransportError(f"{url} answered {response.status_code}: {response.text[:200]}")
        try:
            outputs = response.json()['outputs']
        except (ValueError, KeyError, TypeError):
            raise TransportError(f"{url} sent a malformed reply")
        if not isinstance(outputs, list) or len(outputs) != len(rows):
            raise TransportError(f"{url} sent {len(outputs) if isinstance(outputs, list) else 'no'} "
                                 f"outputs for {len(rows)} inputs")
        try:
            return [ObservedOutput.from_dict(o) for o in outputs]
        except SensiprintError as e:
            raise TransportError(f"{url} sent a malformed output: {e}")

    def query_many(self, inputs: Sequence[np.ndarray]) -> List[ObservedOutput]:
        """分批查询, 每批最多 max_request_inputs 个"""
        rows = [[float(v) for v in np.asarray(x, dtype=np.float32).reshape(-1)] for x in inputs]
        observed: List[ObservedOutput] = []
        for start in range(0, len(rows), self.max_request_inputs):
            observed.extend(self._post(rows[start:start + self.max_request_inputs]))
        return observed

    def __call__(self, x: np.ndarray) -> ObservedOutput:
        return self.query_many([x])[0]

    def health(self) -> dict:
        url = self.endpoint + '/healthz'
        try:
            response = self.session.get(url, timeout=self.timeout)
            response.raise_for_status()
            return response.json()
        except (requests.RequestException, ValueError) as e:
            raise TransportError(f"health check on {url} failed: {e}")


def remote_oracle(endpoint: str, spec: OutputSpec, timeout: float = DEFAULT_TIMEOUT,
                  session: Optional[requests.Session] = None) -> RemoteOracle:
    return RemoteOracle(endpoint, spec, timeout, session=session)


if __name__ == "__main__":
    import sys
    uvicorn.run(create_app(nn.load_model(sys.argv[1]), OutputSpec.top_k(1)), host="127.0.0.1", port=DEFAULT_PORT)
