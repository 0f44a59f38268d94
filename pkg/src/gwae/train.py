"""Training loops: alternating critic/main updates, validation, checkpoints.

Randomness is derived per (seed, purpose, epoch, step) so a run resumed
from a checkpoint replays the remaining steps bit-exactly; all mutable
state (parameters, optimizer buffers, spectral vectors, running prior
statistics) rides in the checkpoint container.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import baselines, checkpoint, losses, nets
from .autodiff import Tape, Tensor
from .config import RunConfig
from .data import build_dataset
from .errors import ContractError, NumericalAbort
from .losses import LossReport, LossWeights, combine
from .optim import Adam, RMSProp

_TAGS = {
    "init": 11,
    "shuffle": 13,
    "reparam": 17,
    "prior": 19,
    "gp": 23,
    "critic-reparam": 29,
    "critic-prior": 31,
    "critic-gp": 37,
    "val": 41,
    "eval": 43,
}


def derive_rng(seed: int, tag: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _TAGS[tag], *indices)))


def build_model(cfg: RunConfig) -> nets.Model:
    rng = derive_rng(cfg.train.seed, "init")
    net = nets.NetConfig(
        width=cfg.model.width,
        critic_width=cfg.model.critic_width,
        critic_feat=cfg.model.critic_feat,
        gmp_components=cfg.model.gmp_components,
        z_only_critic=cfg.ablation.z_only_critic,
    )
    data_dim = _dataset_dim(cfg)
    return nets.Model(cfg.model.kind, data_dim, cfg.model.latent, rng, net)


def _dataset_dim(cfg: RunConfig) -> int:
    name = cfg.data.dataset
    if name == "gmm2d":
        return 2
    if name == "shapes2d":
        return cfg.data.side**2
    if name == "digits8":
        return 64
    if name == "mnist":
        return (28 // cfg.data.downsample) ** 2
    raise ContractError(f"unknown dataset {name!r}")


def loss_weights(cfg: RunConfig) -> LossWeights:
    w = LossWeights(
        lambda_w=cfg.loss.lambda_w,
        lambda_d=cfg.loss.lambda_d,
        lambda_h=cfg.loss.lambda_h,
        lambda_gp=cfg.loss.lambda_gp,
        rho=cfg.effective_rho(),
        xi=cfg.loss.xi,
        n_critic=cfg.loss.n_critic,
    )
    w.validate()
    return w


def mmd_bandwidth(cfg: RunConfig) -> float:
    if cfg.loss.mmd_bandwidth > 0:
        return cfg.loss.mmd_bandwidth
    return baselines.default_bandwidth(cfg.model.latent)


def _sample_prior_values(model, n, rng):
    return model.prior.sample(n, rng, update_running=False).data


def _posterior_values(model, x, rng):
    mu, logvar = model.encoder(x)
    eps = rng.standard_normal(mu.shape)
    return mu.data + np.exp(0.5 * logvar.data) * eps


def gwae_train_step(model, x, cfg, opt_main, opt_critic, epoch, step):
    """One alternation: n_critic critic ascents, then one main descent."""
    w = loss_weights(cfg)
    abl = cfg.ablation
    seed = cfg.train.seed
    b = x.shape[0]
    if b < 2:
        raise ContractError("train step needs a batch of at least 2")

    critic_active = model.critic is not None and not (abl.no_ld or abl.mmd_ld)
    gp_val = 0.0
    if critic_active:
        for k in range(w.n_critic):
            z_inf = _posterior_values(model, x, derive_rng(seed, "critic-reparam", epoch, step, k))
            z_gen = _sample_prior_values(model, b, derive_rng(seed, "critic-prior", epoch, step, k))
            x_gen = model.decoder(Tensor(z_gen)).data
            eps = derive_rng(seed, "critic-gp", epoch, step, k).uniform(size=b)
            with Tape() as tape:
                ld = losses.loss_d(model.critic, x, z_inf, x_gen, z_gen)
                gp = losses.gradient_penalty(model.critic, x, z_inf, x_gen, z_gen, eps)
                objective = ad.add(ad.negate(ld), ad.multiply(gp, Tensor(w.lambda_gp)))
                grads = tape.backward(objective)
            opt_critic.step(grads)
            gp_val = float(gp.data)

    reparam_rng = derive_rng(seed, "reparam", epoch, step)
    prior_rng = derive_rng(seed, "prior", epoch, step)
    with Tape() as tape:
        mu, logvar = model.encoder(x)
        z_inf = nets.reparameterize(mu, logvar, reparam_rng.standard_normal(mu.shape))
        z_gen = model.prior.sample(b, prior_rng, update_running=True)
        x_gen = model.decoder(z_gen)
        l_gw = losses.loss_gw(x_gen, z_gen, model.scale(), w.rho)

        if abl.no_lw:
            l_w = Tensor(0.0)
        else:
            x_hat = model.decoder(z_inf)
            if cfg.loss.adversarial_recon:
                h = model.critic.x_features(x)
                h_hat = model.critic.x_features(x_hat)
                l_w = losses.loss_w_adversarial(Tensor(x), x_hat, h, h_hat)
            else:
                l_w = losses.loss_w(Tensor(x), x_hat)

        if abl.no_ld:
            l_d = Tensor(0.0)
        elif abl.mmd_ld:
            l_d = baselines.mmd_rbf(z_inf, z_gen, mmd_bandwidth(cfg))
        else:
            l_d = losses.loss_d(model.critic, x, z_inf, x_gen, z_gen)

        r_h = Tensor(0.0) if abl.no_rh else losses.entropy_reg(logvar)
        total = losses.total_loss(l_gw, l_w, l_d, r_h, w)
        grads = tape.backward(total)
    opt_main.step(grads)

    report = LossReport(
        step=step,
        epoch=epoch,
        l_gw=float(l_gw.data),
        l_w=float(l_w.data),
        l_d=float(l_d.data),
        r_h=float(r_h.data),
        gp=gp_val,
        total=combine(float(l_gw.data), float(l_w.data), float(l_d.data),
                      float(r_h.data), w),
    )
    aux = {"mean_log_sigma": float(np.mean(logvar.data)) / 2.0}
    if isinstance(model.prior, nets._NormalizedNetPrior):
        zd = z_gen.data
        est_mean = zd.mean(axis=0)
        est_var = zd.var(axis=0, ddof=1)
        aux["bn_mean_dev"] = float(np.max(np.abs(est_mean)))
        aux["bn_var_dev"] = float(np.max(np.abs(est_var - 1.0)))
    return report, aux


def baseline_train_step(model, x, cfg, opt, epoch, step):
    w = loss_weights(cfg)
    seed = cfg.train.seed
    b = x.shape[0]
    reparam_rng = derive_rng(seed, "reparam", epoch, step)
    eps = reparam_rng.standard_normal((b, model.latent))
    with Tape() as tape:
        if cfg.model.kind == "wae-mmd":
            prior_z = model.prior.sample(b, derive_rng(seed, "prior", epoch, step))
            total_t, recon, reg = baselines.wae_mmd_loss(
                model.encoder, model.decoder, x, eps, prior_z,
                cfg.loss.lambda_d, mmd_bandwidth(cfg),
            )
            # recompute the combination so the report identity holds
            xt = Tensor(x)
            l_w, l_d = recon, reg
            total_t = losses.total_loss(Tensor(0.0), l_w, l_d, Tensor(0.0), w)
        else:
            beta = cfg.loss.beta if cfg.model.kind == "beta-vae" else 1.0
            mu, logvar = model.encoder(Tensor(x))
            z = nets.reparameterize(mu, logvar, eps)
            x_hat = model.decoder(z)
            sq = ad.total(ad.square(ad.subtract(Tensor(x), x_hat)), axis=1)
            l_w = ad.mean(ad.multiply(sq, Tensor(0.5)))
            l_d = ad.multiply(baselines.kl_standard_normal(mu, logvar), Tensor(beta))
            total_t = losses.total_loss(Tensor(0.0), l_w, l_d, Tensor(0.0), w)
        grads = tape.backward(total_t)
    opt.step(grads)
    report = LossReport(
        step=step, epoch=epoch, l_gw=0.0,
        l_w=float(l_w.data), l_d=float(l_d.data), r_h=0.0, gp=0.0,
        total=combine(0.0, float(l_w.data), float(l_d.data), 0.0, w),
    )
    return report, {"mean_log_sigma": float(np.mean(logvar.data)) / 2.0
                    if cfg.model.kind != "wae-mmd" else 0.0}


def validation_losses(model, cfg, val_x, epoch) -> dict:
    """Loss terms on the validation set; frozen spectral state, no updates."""
    w = loss_weights(cfg)
    seed = cfg.train.seed
    b = cfg.train.batch_size
    sums = {"l_gw": 0.0, "l_w": 0.0, "l_d": 0.0, "r_h": 0.0}
    count = 0
    for bidx, lo in enumerate(range(0, len(val_x), b)):
        x = val_x[lo : lo + b]
        if len(x) < 2:
            continue
        rng = derive_rng(seed, "val", epoch, bidx)
        mu, logvar = model.encoder(x)
        z_inf = nets.reparameterize(mu, logvar, rng.standard_normal(mu.shape))
        z_gen = model.prior.sample(len(x), rng, update_running=False)
        x_gen = model.decoder(z_gen)
        terms = {
            "l_gw": float(losses.loss_gw(x_gen, z_gen, model.scale(), w.rho).data),
            "r_h": 0.0 if cfg.ablation.no_rh else float(losses.entropy_reg(logvar).data),
        }
        if cfg.model.kind in ("vae", "beta-vae"):
            beta = cfg.loss.beta if cfg.model.kind == "beta-vae" else 1.0
            x_hat = model.decoder(z_inf)
            sq = ad.total(ad.square(ad.subtract(Tensor(x), x_hat)), axis=1)
            terms["l_w"] = float(ad.mean(ad.multiply(sq, Tensor(0.5))).data)
            terms["l_d"] = beta * float(baselines.kl_standard_normal(mu, logvar).data)
            terms["l_gw"] = 0.0
            terms["r_h"] = 0.0
        else:
            x_hat = model.decoder(z_inf)
            terms["l_w"] = 0.0 if cfg.ablation.no_lw else float(
                losses.loss_w(Tensor(x), x_hat).data)
            if cfg.model.kind == "wae-mmd" or cfg.ablation.mmd_ld:
                terms["l_d"] = float(
                    baselines.mmd_rbf(z_inf, z_gen, mmd_bandwidth(cfg)).data)
                if cfg.model.kind == "wae-mmd":
                    terms["l_gw"] = 0.0
                    terms["r_h"] = 0.0
            elif cfg.ablation.no_ld or model.critic is None:
                terms["l_d"] = 0.0
            else:
                terms["l_d"] = float(
                    losses.loss_d(model.critic, x, z_inf, x_gen, z_gen,
                                  power_iters=0).data)
        n = len(x)
        for k in sums:
            sums[k] += terms[k] * n
        count += n
    out = {k: v / max(count, 1) for k, v in sums.items()}
    out["total"] = combine(out["l_gw"], out["l_w"], out["l_d"], out["r_h"], w)
    return out


# ---------------------------------------------------------------------------
# run orchestration


EPOCH_HEADER = ("epoch,val_total,val_l_gw,val_l_w,val_l_d,val_r_h,"
                "mean_log_sigma,bn_mean_dev,bn_var_dev,scale_c")


@dataclass
class RunResult:
    out_dir: Path
    manifest: dict


def model_state_arrays(model) -> dict[str, np.ndarray]:
    arrays = {name: p.data.copy() for name, p in model.named_params().items()}
    for lname, layer in _named_layers(model):
        if layer.sn_state is not None:
            arrays[f"__sn/{lname}/u"] = layer.sn_state.u.copy()
            arrays[f"__sn/{lname}/v"] = layer.sn_state.v.copy()
    if isinstance(model.prior, nets._NormalizedNetPrior):
        arrays["__prior/run_mean"] = model.prior.run_mean.copy()
        arrays["__prior/run_var"] = model.prior.run_var.copy()
    return arrays


def load_model_state(model, arrays: dict[str, np.ndarray]) -> None:
    params = model.named_params()
    for name, p in params.items():
        if name not in arrays:
            raise ContractError(f"checkpoint missing parameter {name!r}")
        p.data = arrays[name].reshape(p.data.shape).copy()
    for lname, layer in _named_layers(model):
        if layer.sn_state is not None and f"__sn/{lname}/u" in arrays:
            layer.sn_state.u = arrays[f"__sn/{lname}/u"].copy()
            layer.sn_state.v = arrays[f"__sn/{lname}/v"].copy()
    if isinstance(model.prior, nets._NormalizedNetPrior):
        if "__prior/run_mean" in arrays:
            model.prior.run_mean = arrays["__prior/run_mean"].copy()
            model.prior.run_var = arrays["__prior/run_var"].copy()


def _named_layers(model):
    out = []
    stacks = [("encoder", model.encoder.stack), ("decoder", model.decoder.stack)]
    if hasattr(model.prior, "stack"):
        stacks.append((f"prior/{model.prior.variant}", model.prior.stack))
    if model.critic is not None:
        if not model.critic.z_only:
            stacks.append(("critic/x", model.critic.xbranch))
        stacks.append(("critic/z", model.critic.zbranch))
        stacks.append(("critic/stem", model.critic.stem))
    for prefix, stack in stacks:
        for i, layer in enumerate(stack.layers):
            out.append((f"{prefix}/layer{i}", layer))
    return out


def save_run_checkpoint(path, model, cfg, opt_main, opt_critic, meta_extra):
    arrays = model_state_arrays(model)
    arrays.update(opt_main.state_arrays("__opt/main"))
    if opt_critic is not None:
        arrays.update(opt_critic.state_arrays("__opt/critic"))
    meta = {
        "config": cfg.to_flat_dict(),
        "config_hash": cfg.config_hash(),
        "kind": cfg.model.kind,
    }
    meta.update(meta_extra)
    checkpoint.save_checkpoint(path, arrays, meta)


def load_run_checkpoint(path, cfg):
    """Rebuild (model, optimizers, meta) from a checkpoint of ``cfg``."""
    arrays, meta = checkpoint.load_checkpoint(path)
    model = build_model(cfg)
    load_model_state(model, arrays)
    opt_main, opt_critic = build_optimizers(model, cfg)
    if any(k.startswith("__opt/main/") for k in arrays):
        opt_main.load_state_arrays("__opt/main", arrays)
    if opt_critic is not None and any(k.startswith("__opt/critic/") for k in arrays):
        opt_critic.load_state_arrays("__opt/critic", arrays)
    return model, opt_main, opt_critic, meta


def build_optimizers(model, cfg):
    kind = cfg.optimizer_kind()
    main_params = model.main_params()
    if kind == "rmsprop":
        opt_main = RMSProp(main_params, lr=cfg.optim.lr_main)
    else:
        opt_main = Adam(main_params, lr=cfg.optim.lr_main)
    opt_critic = None
    if model.critic is not None:
        critic_params = model.critic_params()
        if kind == "rmsprop":
            opt_critic = RMSProp(critic_params, lr=cfg.optim.lr_critic)
        else:
            opt_critic = Adam(critic_params, lr=cfg.optim.lr_critic)
    return opt_main, opt_critic


def run_training(cfg: RunConfig, out_dir, allow_out_of_range=False, resume=None) -> RunResult:
    cfg.validate(allow_out_of_range)
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    train_ds, val_ds, _ = build_dataset(cfg.data, cfg.train.seed)
    if len(train_ds) < cfg.train.batch_size:
        raise ContractError("training split smaller than one batch")

    if resume is not None:
        model, opt_main, opt_critic, meta = load_run_checkpoint(resume, cfg)
        start_epoch = int(meta["epoch"]) + 1
        step = int(meta["step"])
        best_val = float(meta["best_val"])
        bad_epochs = int(meta["bad_epochs"])
        csv_mode = "a"
    else:
        model = build_model(cfg)
        opt_main, opt_critic = build_optimizers(model, cfg)
        start_epoch, step = 0, 0
        best_val, bad_epochs = float("inf"), 0
        csv_mode = "w"

    is_gwae = cfg.model.kind.startswith("gwae")
    losses_csv = out_dir / "losses.csv"
    epochs_csv = out_dir / "epochs.csv"
    with open(losses_csv, csv_mode) as fh_steps, open(epochs_csv, csv_mode) as fh_epochs:
        if csv_mode == "w":
            fh_steps.write(LossReport.CSV_HEADER + "\n")
            fh_epochs.write(EPOCH_HEADER + "\n")

        stopped_early = False
        best_epoch = start_epoch - 1
        last_epoch = start_epoch - 1
        for epoch in range(start_epoch, cfg.train.epochs):
            perm = derive_rng(cfg.train.seed, "shuffle", epoch).permutation(len(train_ds))
            sigma_acc, bn_mean_max, bn_var_max, nb = 0.0, 0.0, 0.0, 0
            for lo in range(0, len(train_ds), cfg.train.batch_size):
                idx = perm[lo : lo + cfg.train.batch_size]
                if len(idx) < 2:
                    continue
                x = train_ds.samples[idx]
                if is_gwae:
                    report, aux = gwae_train_step(model, x, cfg, opt_main, opt_critic,
                                                  epoch, step)
                else:
                    report, aux = baseline_train_step(model, x, cfg, opt_main,
                                                      epoch, step)
                if not report.finite():
                    _write_manifest(out_dir, cfg, status="aborted", epoch=epoch,
                                    wall=time.perf_counter() - t0)
                    raise NumericalAbort(
                        f"non-finite loss at epoch {epoch} step {step}: {report}"
                    )
                fh_steps.write(report.csv_row() + "\n")
                sigma_acc += aux.get("mean_log_sigma", 0.0)
                bn_mean_max = max(bn_mean_max, aux.get("bn_mean_dev", 0.0))
                bn_var_max = max(bn_var_max, aux.get("bn_var_dev", 0.0))
                nb += 1
                step += 1

            val = validation_losses(model, cfg, val_ds.samples, epoch)
            fh_epochs.write(
                ",".join(
                    [str(epoch)]
                    + [format(v, ".17g") for v in (
                        val["total"], val["l_gw"], val["l_w"], val["l_d"], val["r_h"],
                        sigma_acc / max(nb, 1), bn_mean_max, bn_var_max,
                        model.scale_value(),
                    )]
                )
                + "\n"
            )
            fh_steps.flush()
            fh_epochs.flush()

            meta = {"epoch": epoch, "step": step, "best_val": best_val,
                    "bad_epochs": bad_epochs, "val_total": val["total"]}
            if cfg.train.checkpoint_every and (epoch % cfg.train.checkpoint_every == 0):
                save_run_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.gwae", model, cfg,
                                    opt_main, opt_critic, meta)
            last_epoch = epoch

            if val["total"] < best_val:
                best_val = val["total"]
                best_epoch = epoch
                bad_epochs = 0
                save_run_checkpoint(ckpt_dir / "best.gwae", model, cfg,
                                    opt_main, opt_critic, meta)
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.train.patience:
                    stopped_early = True
                    break

    final_meta = {"epoch": last_epoch, "step": step, "best_val": best_val,
                  "bad_epochs": bad_epochs}
    save_run_checkpoint(ckpt_dir / "final.gwae", model, cfg, opt_main, opt_critic,
                        final_meta)
    manifest = _write_manifest(
        out_dir, cfg, status="ok", epoch=last_epoch,
        wall=time.perf_counter() - t0,
        extra={
            "best_epoch": best_epoch,
            "best_val_total": best_val,
            "early_stopped": stopped_early,
            "train_size": len(train_ds),
            "val_size": len(val_ds),
            "data_provenance": train_ds.provenance,
        },
    )
    return RunResult(out_dir=out_dir, manifest=manifest)


def _write_manifest(out_dir, cfg, status, epoch, wall, extra=None) -> dict:
    manifest = {
        "status": status,
        "config": cfg.to_flat_dict(),
        "config_hash": cfg.config_hash(),
        "last_epoch": epoch,
        "wall_time_s": round(wall, 3),
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
