"""Command-line client for the probing service.

The CLI is a thin client: it reads files, sends requests to the service
(in-process by default, or a remote instance via --server) and writes the
responses to CSV/JSON files. Seeds are mandatory so every output is
reproducible; re-running any command with identical arguments produces
byte-identical data files.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from pathlib import Path

import click
import httpx

from .train import load_dataset


class ServiceClient:
    """HTTP client against a remote server or the in-process app."""

    def __init__(self, server: str | None):
        if server:
            self._client = httpx.Client(base_url=server, timeout=None)
        else:
            from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app())

    def post(self, path: str, payload: dict) -> dict:
        resp = self._client.post(path, json=payload)
        if resp.status_code != 200:
            _fail(path, resp)
        return resp.json()


def _fail(path: str, resp) -> None:
    try:
        detail = resp.json()
    except ValueError:
        detail = resp.text
    click.echo(
        json.dumps({"error": {"endpoint": path, "status": resp.status_code, "detail": detail}}),
        err=True,
    )
    sys.exit(1)


def _parse_sigma_grid(spec: str) -> list:
    """'lo:hi:ratio' -> {0} followed by lo * ratio**i up to hi."""
    try:
        lo, hi, ratio = (float(p) for p in spec.split(":"))
    except ValueError:
        raise click.BadParameter("sigma grid must look like lo:hi:ratio")
    if lo <= 0 or hi < lo or ratio <= 1:
        raise click.BadParameter("need 0 < lo <= hi and ratio > 1")
    values = [0.0]
    v = lo
    while v <= hi * (1 + 1e-12):
        values.append(v)
        v *= ratio
    return values


def _noise_payload(site, family, seed, clip, layer) -> dict:
    payload = {"site": "activations" if site == "activations-layer" else site,
               "family": family, "seed": seed}
    if site == "activations-layer":
        if layer is None:
            raise click.BadParameter("--site activations-layer needs --layer K")
        payload["layers"] = [layer]
    if clip is not None:
        if site != "input":
            raise click.BadParameter("--clip only applies to --site input")
        payload["clip"] = [clip[0], clip[1]]
    return payload


def _load_inputs(dataset_path: str):
    ds = load_dataset(dataset_path)
    return [x.tolist() for x in ds.inputs], ds


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path: Path, header: list, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _write_record(record_path, outputs, seed=None, manifest_hash=None) -> None:
    if record_path is None:
        return
    record = {
        "command_line": sys.argv,
        "seed": seed,
        "manifest_hash": manifest_hash,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": [str(p) for p in outputs],
    }
    _write_json(Path(record_path), record)


server_option = click.option("--server", default=None, help="Remote service URL (default: in-process).")
record_option = click.option("--record", default=None, type=click.Path(), help="Write a run record JSON here.")


@click.group()
def main():
    """Probe feedforward networks with controlled activation noise."""


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve(host, port):
    """Run the probing service with uvicorn."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@server_option
@record_option
def train(manifest, out, server, record):
    """Train a model from an experiment manifest and save it as JSON."""
    with open(manifest) as f:
        doc = json.load(f)
    resp = ServiceClient(server).post("/v1/train", {"manifest": doc})
    out = Path(out)
    _write_json(out, resp["model"])
    click.echo(f"trained model -> {out} (train accuracy {resp['train_accuracy']:.4f})")
    _write_record(record, [out], manifest_hash=resp["manifest_hash"])


def _sigma_options(fn):
    fn = click.option("--sigma", "sigmas", multiple=True, type=float,
                      help="Explicit grid point; repeatable.")(fn)
    fn = click.option("--sigma-grid", default=None,
                      help="Geometric grid lo:hi:ratio (zero prepended).")(fn)
    return fn


def _resolve_sigmas(sigmas, sigma_grid) -> list:
    if sigma_grid and sigmas:
        raise click.BadParameter("use either --sigma or --sigma-grid, not both")
    if sigma_grid:
        return _parse_sigma_grid(sigma_grid)
    if sigmas:
        return sorted(set(sigmas))
    raise click.BadParameter("a sigma grid is required (--sigma or --sigma-grid)")


@main.command()
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--site", default="activations",
              type=click.Choice(["input", "activations", "activations-layer", "parameters"]))
@click.option("--layer", default=None, type=int, help="Layer index for --site activations-layer.")
@click.option("--family", default="gaussian", type=click.Choice(["gaussian", "laplace", "uniform"]))
@_sigma_options
@click.option("--trials", default=1000, type=int, show_default=True)
@click.option("--seed", required=True, type=int)
@click.option("--clip", nargs=2, type=float, default=None, help="lo hi input clipping.")
@click.option("--out", required=True, type=click.Path())
@click.option("--format", "fmt", default="csv", type=click.Choice(["csv", "json"]))
@server_option
@record_option
def probe(model, dataset, site, layer, family, sigmas, sigma_grid, trials, seed, clip, out,
          fmt, server, record):
    """Estimate output distributions over a sigma grid."""
    with open(model) as f:
        model_doc = json.load(f)
    inputs, ds = _load_inputs(dataset)
    if clip is None and site == "input" and ds.value_range is not None:
        clip = ds.value_range  # pixel-like data clips by default
    payload = {
        "model": model_doc,
        "inputs": inputs,
        "sigmas": _resolve_sigmas(sigmas, sigma_grid),
        "trials": trials,
        "noise": _noise_payload(site, family, seed, clip, layer),
    }
    resp = ServiceClient(server).post("/v1/probe", payload)
    out = Path(out)
    if fmt == "json":
        _write_json(out, resp)
    else:
        rows = [
            (d["input_id"], d["sigma"], d["trials"], k, p)
            for d in resp["distributions"]
            for k, p in enumerate(d["probs"])
        ]
        _write_csv(out, ["input_id", "sigma", "trials", "class", "prob"], rows)
    click.echo(f"wrote {len(resp['distributions'])} distributions -> {out}")
    _write_record(record, [out], seed=seed)


@main.command()
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--site", default="activations",
              type=click.Choice(["input", "activations", "activations-layer", "parameters"]))
@click.option("--layer", default=None, type=int)
@click.option("--family", default="gaussian", type=click.Choice(["gaussian", "laplace", "uniform"]))
@_sigma_options
@click.option("--trials", default=1000, type=int, show_default=True)
@click.option("--threshold", default=0.5, type=float, show_default=True)
@click.option("--seed", required=True, type=int)
@click.option("--clip", nargs=2, type=float, default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--format", "fmt", default="csv", type=click.Choice(["csv", "json"]))
@server_option
@record_option
def escape(model, dataset, site, layer, family, sigmas, sigma_grid, trials, threshold, seed,
           clip, out, fmt, server, record):
    """Per-sample escape noise plus the dataset average."""
    with open(model) as f:
        model_doc = json.load(f)
    inputs, _ = _load_inputs(dataset)
    payload = {
        "model": model_doc,
        "inputs": inputs,
        "sigmas": _resolve_sigmas(sigmas, sigma_grid),
        "trials": trials,
        "threshold": threshold,
        "noise": _noise_payload(site, family, seed, clip, layer),
    }
    resp = ServiceClient(server).post("/v1/escape", payload)
    out = Path(out)
    if fmt == "json":
        _write_json(out, resp)
    else:
        rows = [
            (r["input_id"], r["k_star"], r["escaped"],
             "" if r["escape_sigma"] is None else r["escape_sigma"], r["threshold"])
            for r in resp["results"]
        ]
        rows.append(("average", "", "", resp["mean_escape_sigma"], threshold))
        _write_csv(out, ["input_id", "k_star", "escaped", "escape_sigma", "threshold"], rows)
        curve_rows = [
            (r["input_id"], pt["sigma"], pt["prob"])
            for r in resp["results"]
            for pt in r["curve"]
        ]
        curve_path = out.with_name(out.stem + "_curves" + out.suffix)
        _write_csv(curve_path, ["input_id", "sigma", "prob"], curve_rows)
    click.echo(f"mean escape sigma {resp['mean_escape_sigma']!r} "
               f"({resp['not_escaped']} not escaped) -> {out}")
    _write_record(record, [out], seed=seed)


@main.command()
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--site", default="activations",
              type=click.Choice(["input", "activations", "activations-layer", "parameters"]))
@click.option("--layer", default=None, type=int)
@click.option("--family", default="gaussian", type=click.Choice(["gaussian", "laplace", "uniform"]))
@_sigma_options
@click.option("--trials", default=1000, type=int, show_default=True)
@click.option("--seed", required=True, type=int)
@click.option("--clip", nargs=2, type=float, default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--format", "fmt", default="csv", type=click.Choice(["csv", "json"]))
@server_option
@record_option
def stationary(model, dataset, site, layer, family, sigmas, sigma_grid, trials, seed, clip,
               out, fmt, server, record):
    """Stationarity curves: pairwise JS, consecutive JS, mean entropy."""
    with open(model) as f:
        model_doc = json.load(f)
    inputs, _ = _load_inputs(dataset)
    payload = {
        "model": model_doc,
        "inputs": inputs,
        "sigmas": _resolve_sigmas(sigmas, sigma_grid),
        "trials": trials,
        "noise": _noise_payload(site, family, seed, clip, layer),
    }
    resp = ServiceClient(server).post("/v1/stationarity", payload)
    out = Path(out)
    if fmt == "json":
        _write_json(out, resp)
    else:
        rows = []
        for s, v in zip(resp["sigmas"], resp["mean_pairwise_js"]):
            rows.append((s, "mean_pairwise_js", v))
        for s, v in zip(resp["sigmas"][1:], resp["consecutive_js"]):
            rows.append((s, "consecutive_js", v))
        for s, v in zip(resp["sigmas"], resp["mean_entropy"]):
            rows.append((s, "mean_entropy", v))
        _write_csv(out, ["sigma", "metric", "value"], rows)
    click.echo(f"stationarity curves -> {out}")
    _write_record(record, [out], seed=seed)


@main.command()
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--radius", default=5.0, type=float, show_default=True)
@click.option("--samples", default=10, type=int, show_default=True,
              help="Inputs sampled in the radius ball.")
@click.option("--seed", required=True, type=int)
@click.option("--out", required=True, type=click.Path())
@server_option
@record_option
def verify(model, radius, samples, seed, out, server, record):
    """Audit the decomposition bounds; exits nonzero if any check fails."""
    with open(model) as f:
        model_doc = json.load(f)
    payload = {"model": model_doc, "radius": radius, "num_inputs": samples, "seed": seed}
    resp = ServiceClient(server).post("/v1/verify", payload)
    out = Path(out)
    _write_json(out, resp)
    for check in resp["checks"]:
        status = "pass" if check["passed"] else "FAIL"
        click.echo(f"{status}  {check['name']} (samples={check['samples']}, "
                   f"max_violation={check['max_violation']:.3e})")
    _write_record(record, [out], seed=seed)
    if not resp["passed"]:
        sys.exit(1)


@main.command()
@click.argument("name", type=click.Choice(["random-label", "split-class", "backdoor"]))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--trials", default=None, type=int)
@server_option
@record_option
def experiment(name, manifest, out, trials, server, record):
    """Run an end-to-end experiment and emit figure-analog data files."""
    with open(manifest) as f:
        doc = json.load(f)
    payload = {"name": name, "manifest": doc}
    if trials is not None:
        payload["trials"] = trials
    resp = ServiceClient(server).post("/v1/experiment", payload)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{name}.json"
    _write_json(json_path, resp)
    rows = resp["result"]["rows"]
    csv_path = out_dir / f"{name}.csv"
    header = list(rows[0].keys())
    _write_csv(csv_path, header, [tuple(r.get(k) for k in header) for r in rows])
    click.echo(f"experiment {name} -> {json_path}, {csv_path}")
    _write_record(record, [json_path, csv_path], manifest_hash=resp["manifest_hash"])


if __name__ == "__main__":
    main()
