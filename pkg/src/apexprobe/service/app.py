"""FastAPI service exposing the probing toolkit.

All endpoints are pure functions of their request body, so responses are
reproducible from the request alone.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import metrics, perturb, theory
from ..experiments import (
    ExperimentManifest,
    ManifestError,
    run_backdoor_experiment,
    run_random_label_experiment,
    run_split_class_experiment,
    train_from_manifest,
)
from ..model import ModelError
from ..train import accuracy
from . import schemas


def create_app() -> FastAPI:
    app = FastAPI(title="apexprobe", version="0.1.0")

    @app.get("/v1/health")
    def health():
        return {"status": "ok"}

    @app.post("/v1/forward", response_model=schemas.ForwardResponse)
    def forward_endpoint(req: schemas.ForwardRequest):
        from ..model import forward

        net = _network(req.model)
        try:
            trace = forward(net, req.input)
        except ModelError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return schemas.ForwardResponse(
            logits=trace.logits.tolist(), predicted_class=trace.predicted_class
        )

    @app.post("/v1/probe", response_model=schemas.ProbeResponse)
    def probe_endpoint(req: schemas.ProbeRequest):
        net = _network(req.model)
        ids = req.input_ids or [str(i) for i in range(len(req.inputs))]
        out = []
        try:
            for x, input_id in zip(req.inputs, ids):
                for sigma in req.sigmas:
                    dist = perturb.estimate_distribution(
                        net, x, req.noise.config(sigma), req.trials, input_id
                    )
                    out.append(
                        schemas.DistributionOut(
                            input_id=input_id,
                            sigma=sigma,
                            trials=req.trials,
                            probs=dist.probs.tolist(),
                        )
                    )
        except (ModelError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return schemas.ProbeResponse(distributions=out)

    @app.post("/v1/escape", response_model=schemas.EscapeResponse)
    def escape_endpoint(req: schemas.EscapeRequest):
        net = _network(req.model)
        ids = req.input_ids or [str(i) for i in range(len(req.inputs))]
        try:
            grid = metrics.SigmaGrid(tuple(req.sigmas))
            cfg = req.noise.config(0.0)
            results = [
                metrics.escape_noise(net, x, grid, cfg, req.trials, req.threshold, input_id)
                for x, input_id in zip(req.inputs, ids)
            ]
        except (ModelError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        not_escaped = sum(1 for r in results if not r.escaped)
        # censored samples count at the grid maximum
        values = [r.escape_sigma if r.escaped else grid.values[-1] for r in results]
        mean = sum(values) / len(values) if values else None
        return schemas.EscapeResponse(
            results=[
                schemas.EscapeOut(
                    input_id=r.input_id,
                    k_star=r.k_star,
                    escaped=r.escaped,
                    escape_sigma=r.escape_sigma,
                    threshold=r.threshold,
                    curve=[schemas.EscapeCurvePoint(sigma=s, prob=p) for s, p in r.curve],
                )
                for r in results
            ],
            mean_escape_sigma=mean,
            not_escaped=not_escaped,
        )

    @app.post("/v1/stationarity", response_model=schemas.StationarityResponse)
    def stationarity_endpoint(req: schemas.StationarityRequest):
        net = _network(req.model)
        try:
            grid = metrics.SigmaGrid(tuple(req.sigmas))
            report = metrics.stationarity_report(
                net, [list(x) for x in req.inputs], grid, req.noise.config(0.0), req.trials
            )
        except (ModelError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return schemas.StationarityResponse(
            sigmas=list(grid.values),
            mean_pairwise_js=report.mean_pairwise_js,
            consecutive_js=report.consecutive_js,
            mean_entropy=report.mean_entropy,
        )

    @app.post("/v1/verify", response_model=schemas.VerifyResponse)
    def verify_endpoint(req: schemas.VerifyRequest):
        net = _network(req.model)
        try:
            report = theory.run_verification(
                net,
                req.radius,
                num_inputs=req.num_inputs,
                sigmas=tuple(req.sigmas),
                seed=req.seed,
                num_draws=req.num_draws,
                lemma_samples=req.lemma_samples,
            )
        except theory.UnsupportedActivationError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return schemas.VerifyResponse(
            passed=report.passed,
            checks=[schemas.CheckOut(**c.to_dict()) for c in report.checks],
        )

    @app.post("/v1/train", response_model=schemas.TrainResponse)
    def train_endpoint(req: schemas.TrainRequest):
        try:
            manifest = ExperimentManifest.from_dict(req.manifest)
            net = train_from_manifest(manifest)
            from ..experiments import build_dataset

            acc = accuracy(net, build_dataset(manifest))
        except (ManifestError, ModelError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return schemas.TrainResponse(
            model=schemas.ModelDocument.from_network(net),
            manifest_hash=manifest.hash(),
            train_accuracy=acc,
        )

    @app.post("/v1/experiment", response_model=schemas.ExperimentResponse)
    def experiment_endpoint(req: schemas.ExperimentRequest):
        try:
            manifest = ExperimentManifest.from_dict(req.manifest)
            if req.name == "random-label":
                grid = metrics.SigmaGrid(tuple(req.sigmas or _default_escape_grid()))
                result = run_random_label_experiment(
                    manifest,
                    req.ratios or [0.0, 0.25, 0.5, 0.75],
                    req.seeds or [0, 1, 2],
                    grid,
                    req.trials or 400,
                )
            elif req.name == "split-class":
                grid = metrics.SigmaGrid(tuple(req.sigmas or [0.05, 0.3, 1.5, 8.0, 40.0]))
                result = run_split_class_experiment(manifest, grid, req.trials or 1000)
            else:
                result = run_backdoor_experiment(
                    manifest,
                    req.seeds or [0, 1, 2, 3, 4],
                    sigma_large=req.sigma_large,
                    trials=req.trials or 2000,
                )
        except (ManifestError, ModelError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return schemas.ExperimentResponse(
            experiment=req.name, manifest_hash=manifest.hash(), result=result
        )

    return app


def _network(doc: schemas.ModelDocument):
    try:
        return doc.to_network()
    except ModelError as exc:
        raise HTTPException(status_code=422, detail=str(exc))


def _default_escape_grid() -> list:
    return list(metrics.SigmaGrid.geometric(0.02, 1.5, 16).values)


app = create_app()
