"""Thin-client command line for the harness service.

Every subcommand builds a `RunSpec` (config file values overridden by
explicit flags) and POSTs it to the HTTP app: a remote server when
--server-url is given, otherwise an in-process instance of the same
app.  Exit codes are a stable contract: 0 success, 1 check failure,
2 configuration error.
"""

from __future__ import annotations

import json
import sys

import click
import httpx

from .schemas import RunSpec

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2


def _client(server_url: str | None) -> httpx.Client:
    if server_url:
        return httpx.Client(base_url=server_url, timeout=600.0)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import app  # deferred so --help stays fast

    return TestClient(app)


def _build_spec(config, overrides) -> RunSpec:
    data = {}
    if config:
        try:
            with open(config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise click.ClickException(f"bad config file: {exc}")
        if not isinstance(data, dict):
            raise click.ClickException("config file must hold a flat JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None and v != ()})
    try:
        return RunSpec(**data)
    except Exception as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _post(server_url, path, spec: RunSpec):
    with _client(server_url) as client:
        resp = client.post(path, json=spec.model_dump())
    if resp.status_code in (400, 422):
        detail = resp.json().get("detail", resp.text)
        click.echo(f"configuration error: {detail}", err=True)
        sys.exit(EXIT_CONFIG)
    resp.raise_for_status()
    return resp.json()


def _write_out(text: str, out: str | None):
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        click.echo(text, nl=not text.endswith("\n"))


def common_options(fn):
    opts = [
        click.option("--config", type=click.Path(), default=None,
                     help="flat JSON file with RunSpec fields; flags override it"),
        click.option("--server-url", default=None,
                     help="URL of a running service; default runs in-process"),
        click.option("--seed", type=int, default=None),
        click.option("--weight-file", type=click.Path(), default=None),
        click.option("--sparsity", type=float, default=None),
        click.option("--rectify-freq", type=int, default=None),
        click.option("--block-size", type=int, default=None),
        click.option("--n-min", type=int, default=None),
        click.option("--n-local", type=int, default=None),
        click.option("--prefix-len", type=int, default=None),
        click.option("--max-steps", type=int, default=None),
        click.option("--mode", type=click.Choice(["dense", "sparse", "resa"]),
                     default=None),
        click.option("--prompt-hex", default=None),
        click.option("--prompt-file", type=click.Path(), default=None),
        click.option("--out", type=click.Path(), default=None),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _spec_from_kwargs(kwargs) -> tuple[RunSpec, str | None, str | None]:
    config = kwargs.pop("config")
    server_url = kwargs.pop("server_url")
    out = kwargs.pop("out")
    return _build_spec(config, kwargs), server_url, out


@click.group()
def main():
    """Sparse-decoding verification and measurement harness."""


@main.command()
@common_options
def verify(**kwargs):
    """Run the full invariant suite; nonzero exit on any failure."""
    spec, server_url, out = _spec_from_kwargs(kwargs)
    payload = _post(server_url, "/verify", spec)
    lines = []
    for c in payload["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        lines.append(f"[{status}] {c['name']}: observed={c['observed']:.3g} "
                     f"allowed={c['allowed']:.3g} {c['detail']}".rstrip())
    summary = "all checks passed" if payload["passed"] else "CHECK FAILURES PRESENT"
    text = "\n".join(lines + [summary]) + "\n"
    _write_out(text, out)
    sys.exit(EXIT_OK if payload["passed"] else EXIT_CHECK_FAILED)


@main.command()
@common_options
@click.option("--sweep", is_flag=True, default=None,
              help="sweep rectification frequency and sparsity grids")
@click.option("--probe-step", "probe_steps", type=int, multiple=True,
              help="explicit probe steps (repeatable)")
def drift(**kwargs):
    """Decode with drift probes; emit a CSV trace."""
    if kwargs.get("probe_steps"):
        kwargs["probe_steps"] = list(kwargs["probe_steps"])
    spec, server_url, out = _spec_from_kwargs(kwargs)
    payload = _post(server_url, "/drift", spec)
    _write_out(payload["csv"], out)


@main.command()
@common_options
@click.option("--measure-drift", is_flag=True, default=None,
              help="also compute final cache drift (desk-scale lengths only)")
def memaccess(**kwargs):
    """Run a decode and report measured vs predicted element-read ratios."""
    spec, server_url, out = _spec_from_kwargs(kwargs)
    payload = _post(server_url, "/memaccess", spec)
    _write_out(json.dumps(payload["row"]) + "\n", out)


@main.command()
@common_options
@click.option("--bench-prefix", "bench_prefixes", type=int, multiple=True,
              help="prefix lengths to benchmark (repeatable)")
@click.option("--bench-steps", type=int, default=None)
def bench(**kwargs):
    """Time per-step decode for dense vs rectified-sparse; emit a CSV."""
    if kwargs.get("bench_prefixes"):
        kwargs["bench_prefixes"] = list(kwargs["bench_prefixes"])
    spec, server_url, out = _spec_from_kwargs(kwargs)
    payload = _post(server_url, "/bench", spec)
    _write_out(payload["csv"], out)


@main.command()
@common_options
def generate(**kwargs):
    """Greedy-decode tokens and print run metadata as JSON lines."""
    spec, server_url, out = _spec_from_kwargs(kwargs)
    payload = _post(server_url, "/generate", spec)
    text = (json.dumps({"tokens": payload["tokens"], "text_hex": payload["text_hex"]})
            + "\n" + json.dumps(payload["row"]) + "\n")
    _write_out(text, out)


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
