"""Command-line interface.

Subcommands: decompose, relight, estimate-light, render-synth, metrics,
serve. Exit codes: 0 success, 1 error, 2 decomposition finished without
converging (best-so-far is still written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .decomposition import DecompositionSet
from .evalsynth import SyntheticScene, psnr, psnr_grad, render_synthetic, ssim
from .geometry import Camera, load_obj, rasterize_normals
from .imgcore import (
    ImageBuffer,
    Mask,
    load_image,
    load_mask,
    load_normal_map,
    save_image,
    save_mask,
    save_normal_preview,
)
from .inverse import DivergenceError, OptimizerConfig, decompose, estimate_lighting_ls
from .server import create_server, light_from_spec, relight_png, serve_forever
from .sh import EnvironmentMap, ShLighting, project_env_to_sh


def _err(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


class _DirLock:
    """Exclusive per-output-directory lock for decomposition jobs."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another job: {self.path}"
            ) from None
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _load_initial_normals(args, mask: Mask):
    if args.normal:
        return load_normal_map(_require(args.normal, "normal map"), mask), mask
    if args.mesh:
        mesh = load_obj(_require(args.mesh, "mesh"))
        if args.ortho_height:
            mesh.camera = Camera(ortho_height=args.ortho_height)
        else:
            extent = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
            center = (mesh.vertices.max(axis=0) + mesh.vertices.min(axis=0)) / 2
            height = 1.1 * float(max(extent[0], extent[1]))
            mesh.camera = Camera(
                position=center + np.array([0.0, 0.0, 2.0 * max(1e-6, extent[2])]),
                target=center,
                ortho_height=height,
            )
        normals, coverage = rasterize_normals(mesh, mask.width, mask.height)
        merged = Mask(mask.values * coverage.values)
        return normals, merged
    raise ValueError("either --normal or --mesh is required")


def cmd_decompose(args) -> int:
    image = load_image(_require(args.image, "input image"), transfer=args.transfer)
    mask = load_mask(_require(args.mask, "mask"))
    config = OptimizerConfig.load(_require(args.config, "optimizer config")) if args.config \
        else OptimizerConfig()
    if args.seed is not None:
        from dataclasses import replace
        config = replace(config, seed=args.seed)
    normals, mask = _load_initial_normals(args, mask)

    out_dir = Path(args.out)
    with _DirLock(out_dir):
        try:
            result = decompose(image, normals, mask, config=config)
        except DivergenceError as exc:
            return _err(str(exc))
        recon = result.reconstruction()
        img3 = image.data if image.channels == 3 else np.repeat(image.data, 3, axis=2)
        target = ImageBuffer(img3)
        result.meta["metrics"] = {
            "psnr": psnr(recon, target, result.mask),
            "ssim": ssim(recon, target),
            "psnr_grad": psnr_grad(recon, target, result.mask),
        }
        result.save_dir(out_dir)
    print(f"decomposition written to {out_dir}")
    for key, value in result.meta["metrics"].items():
        print(f"  {key:10s} {value:.4f}")
    if not result.meta.get("converged", True):
        print("warning: optimization did not converge within budget", file=sys.stderr)
        return 2
    return 0


def _light_spec_from_args(args) -> dict:
    sources = [bool(args.light_json), bool(args.hdr), bool(args.direction)]
    if sum(sources) != 1:
        raise ValueError("give exactly one of --light-json, --hdr, --direction")
    if args.light_json:
        payload = json.loads(_require(args.light_json, "light JSON").read_text())
        return {"sh": payload["sh"]} if "sh" in payload else payload
    if args.hdr:
        env = EnvironmentMap(load_image(_require(args.hdr, "environment map")))
        return project_env_to_sh(env).to_json_dict()
    direction = [float(v) for v in args.direction.split(",")]
    if len(direction) != 3:
        raise ValueError("--direction needs x,y,z")
    spec = {"direction": direction, "intensity": args.intensity, "ambient": args.ambient}
    return spec


def cmd_relight(args) -> int:
    dec = DecompositionSet.load_dir(_require(args.decomposition, "decomposition directory"))
    spec = _light_spec_from_args(args)
    if args.phong_s:
        spec["phong_s"] = args.phong_s
    light = light_from_spec(spec)
    from .shading import relight as do_relight

    background = None
    if args.background:
        background = load_image(_require(args.background, "background"), transfer=args.transfer)
    out_linear = do_relight(dec, light, s=spec.get("phong_s"), background=background)
    out_png = Path(args.out)
    if out_png.suffix.lower() != ".png":
        raise ValueError("--out must be a .png path (a .pfm is written alongside)")
    if background is None:
        # keep parity with the HTTP endpoint: identical bytes for identical lights
        png_bytes = relight_png(dec, spec)
        out_png.write_bytes(png_bytes)
    else:
        save_image(out_linear, out_png, transfer="srgb")
    save_image(out_linear, out_png.with_suffix(".pfm"))
    print(f"relit image written to {out_png} (+ .pfm)")
    return 0


def cmd_estimate_light(args) -> int:
    image = load_image(_require(args.image, "image"), transfer=args.transfer)
    albedo = load_image(_require(args.albedo, "albedo"), transfer="linear")
    mask = load_mask(_require(args.mask, "mask"))
    normals = load_normal_map(_require(args.normal, "normal map"), mask)
    light = estimate_lighting_ls(image, albedo, normals, mask)
    light.save(args.out)
    print(f"lighting written to {args.out}")
    return 0


def cmd_render_synth(args) -> int:
    scene = SyntheticScene.load(_require(args.scene, "scene spec"))
    bundle = render_synthetic(scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(bundle.image, out / "image.pfm")
    save_image(bundle.image, out / "image.png", transfer="srgb")
    save_image(bundle.albedo, out / "albedo.pfm")
    save_image(ImageBuffer(bundle.normals.vectors), out / "normal.pfm")
    save_normal_preview(bundle.normals, out / "normal_preview.png")
    save_image(bundle.cspec, out / "cspec.pfm")
    save_mask(bundle.mask, out / "mask.png")
    bundle.light.save(out / "light.json")
    print(f"synthetic bundle written to {out}")
    return 0


def cmd_metrics(args) -> int:
    a = load_image(_require(args.a, "first image"), transfer=args.transfer)
    b = load_image(_require(args.b, "second image"), transfer=args.transfer)
    mask = load_mask(_require(args.mask, "mask")) if args.mask else None
    report = {
        "psnr": psnr(a, b, mask),
        "ssim": ssim(a, b),
        "psnr_grad": psnr_grad(a, b, mask),
    }
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))
    print(f"{'metric':12s}{'value':>12s}")
    for key, value in report.items():
        print(f"{key:12s}{value:12.4f}")
    return 0


def cmd_serve(args) -> int:
    server = create_server(
        args.decomposition, args.port, host=args.host, static_dir=args.static_dir
    )
    print(f"serving on http://{args.host}:{args.port} "
          f"({len(args.decomposition)} decomposition(s))")
    serve_forever(server)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relightkit",
        description="Reflectance decomposition and relighting toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="decompose an image into reflectance maps")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--normal", help="initial normal map (.pfm raw or .png (n+1)/2)")
    p.add_argument("--mesh", help="OBJ mesh rasterized for initial normals")
    p.add_argument("--ortho-height", type=float, default=None)
    p.add_argument("--config", help="optimizer config JSON")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--transfer", choices=["linear", "srgb"], default="srgb")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("relight", help="re-render a decomposition under a new light")
    p.add_argument("--decomposition", required=True)
    p.add_argument("--light-json", help="ShLighting JSON file")
    p.add_argument("--hdr", help="equirectangular HDR environment map")
    p.add_argument("--direction", help="x,y,z of a directional light")
    p.add_argument("--intensity", type=float, default=1.0)
    p.add_argument("--ambient", type=float, default=0.0)
    p.add_argument("--phong-s", dest="phong_s", type=float, default=None)
    p.add_argument("--background", help="optional background image")
    p.add_argument("--transfer", choices=["linear", "srgb"], default="srgb")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("estimate-light", help="least-squares SH lighting fit")
    p.add_argument("--image", required=True)
    p.add_argument("--albedo", required=True)
    p.add_argument("--normal", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--transfer", choices=["linear", "srgb"], default="srgb")
    p.add_argument("--out", required=True, help="output light.json path")
    p.set_defaults(func=cmd_estimate_light)

    p = sub.add_parser("render-synth", help="render a synthetic ground-truth bundle")
    p.add_argument("--scene", required=True, help="scene spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_render_synth)

    p = sub.add_parser("metrics", help="PSNR / SSIM / PSNR_grad between two images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--mask")
    p.add_argument("--transfer", choices=["linear", "srgb"], default="linear")
    p.add_argument("--json-out", dest="json_out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("serve", help="HTTP service for the studio UI")
    p.add_argument("--decomposition", required=True, nargs="+",
                   help="one or more decomposition directories")
    p.add_argument("--port", type=int, default=8572)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--static-dir", default=None,
                   help="serve this directory at / (the built studio UI)")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, RuntimeError, OSError, KeyError) as exc:
        return _err(str(exc))


if __name__ == "__main__":
    sys.exit(main())
