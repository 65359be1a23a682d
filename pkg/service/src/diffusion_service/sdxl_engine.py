"""Pretrained latent text-to-image engine (weight-gated production path).

Wraps a Stable Diffusion XL checkpoint: VAE encode/decode, per-step UNet
noise prediction, and cross-attention capture averaged over heads and layers,
mean-pooled to the advertised 16x16 grid. Token spans come from the first
text encoder's tokenizer; the second encoder contributes conditioning but not
attention capture, and /v1/capabilities documents that choice.

Everything here imports torch and diffusers lazily: the module is importable
without them, and construction fails with a clear message when the `sdxl`
extra or the checkpoint is missing. The rest of the service is engine-generic
and fully covered by the reference engine, so nothing outside this file
depends on these libraries.
"""

from __future__ import annotations

import io
from typing import TYPE_CHECKING

import numpy as np

from .engines import EngineError, TokenGrid

if TYPE_CHECKING:  # pragma: no cover
    import torch


class SdxlEngine:
    model_id: str
    latent_shape: tuple[int, int, int]
    attention_hw: tuple[int, int]

    def __init__(
        self,
        checkpoint: str = "stabilityai/stable-diffusion-xl-base-1.0",
        device: str = "cpu",
        image_size: int = 1024,
        attention_hw: tuple[int, int] = (16, 16),
    ):
        try:
            import torch
            from diffusers import StableDiffusionXLPipeline
        except ImportError as err:  # pragma: no cover - exercised only without extras
            raise EngineError(
                "the sdxl engine needs the [sdxl] extra (torch, diffusers, transformers)"
            ) from err

        self._torch = torch
        self.device = device
        self.model_id = checkpoint
        self.image_size = image_size
        self.attention_hw = tuple(attention_hw)
        self._pipe = StableDiffusionXLPipeline.from_pretrained(
            checkpoint, torch_dtype=torch.float32
        ).to(device)
        self._pipe.unet.eval()
        self._pipe.vae.eval()
        factor = 2 ** (len(self._pipe.vae.config.block_out_channels) - 1)
        side = image_size // factor
        self.latent_shape = (self._pipe.unet.config.in_channels, side, side)
        self._capture: list[np.ndarray] = []
        self._install_capture_hooks()

    def alphas(self) -> np.ndarray:
        return np.asarray(self._pipe.scheduler.alphas.cpu().numpy(), dtype=np.float64)

    # -- attention capture ---------------------------------------------------

    def _install_capture_hooks(self) -> None:
        """Record softmax cross-attention maps on every text-conditioned layer."""
        torch = self._torch
        engine = self

        def hook(module, args, kwargs, output):
            encoder_states = kwargs.get("encoder_hidden_states")
            if encoder_states is None and len(args) > 1:
                encoder_states = args[1]
            if encoder_states is None:
                return  # self-attention
            hidden = args[0] if args else kwargs["hidden_states"]
            with torch.no_grad():
                query = module.to_q(hidden)
                key = module.to_k(encoder_states)
                query = module.head_to_batch_dim(query)
                key = module.head_to_batch_dim(key)
                probs = module.get_attention_scores(query, key)  # (heads, pixels, tokens)
            engine._capture.append(probs.mean(dim=0).cpu().numpy())

        for name, module in self._pipe.unet.named_modules():
            if name.endswith("attn2"):  # text-conditioning cross-attention only
                module.register_forward_hook(hook, with_kwargs=True)

    def _pooled_token_grids(self, token_count: int) -> list[TokenGrid]:
        ah, aw = self.attention_hw
        grids = []
        for probs in self._capture:
            pixels = probs.shape[0]
            side = int(round(pixels**0.5))
            if side * side != pixels:
                continue
            grid = probs.reshape(side, side, -1)
            if side < ah:
                continue  # coarser than the advertised resolution
            pool = side // ah
            grid = grid[: ah * pool, : aw * pool].reshape(ah, pool, aw, pool, -1).mean((1, 3))
            grids.append(grid)
        if not grids:
            raise EngineError("no cross-attention maps captured")
        stacked = np.mean(grids, axis=0)  # (ah, aw, tokens)
        return [
            TokenGrid(span=(i, i + 1), grid=np.ascontiguousarray(stacked[:, :, i]))
            for i in range(min(token_count, stacked.shape[-1]))
        ]

    # -- contract --------------------------------------------------------------

    def _embed(self, prompt: str):
        pipe = self._pipe
        (
            prompt_embeds,
            _,
            pooled,
            _,
        ) = pipe.encode_prompt(prompt=prompt, device=self.device, do_classifier_free_guidance=False)
        return prompt_embeds, pooled

    def predict(self, latent, timestep, prompt):
        torch = self._torch
        if tuple(latent.shape) != self.latent_shape:
            raise EngineError(f"latent shape {latent.shape} != {self.latent_shape}")
        self._capture = []
        sample = torch.from_numpy(np.asarray(latent, dtype=np.float32))[None].to(self.device)
        prompt_embeds, pooled = self._embed(prompt)
        time_ids = torch.tensor(
            [[self.image_size, self.image_size, 0, 0, self.image_size, self.image_size]],
            dtype=torch.float32,
            device=self.device,
        )
        with torch.no_grad():
            eps = self._pipe.unet(
                sample,
                torch.tensor([timestep], device=self.device),
                encoder_hidden_states=prompt_embeds,
                added_cond_kwargs={"text_embeds": pooled, "time_ids": time_ids},
            ).sample[0]
        eps_np = eps.cpu().numpy().astype(np.float64)
        if not prompt:
            return eps_np, None
        token_count = len(
            self._pipe.tokenizer(prompt, truncation=True).input_ids
        )
        return eps_np, self._pooled_token_grids(token_count)

    def encode(self, png_bytes: bytes) -> np.ndarray:
        torch = self._torch
        from PIL import Image

        try:
            with Image.open(io.BytesIO(png_bytes)) as img:
                rgb = img.convert("RGB").resize((self.image_size, self.image_size))
        except Exception as err:
            raise EngineError(f"undecodable image payload: {err}") from err
        frame = np.asarray(rgb, dtype=np.float32) / 127.5 - 1.0
        tensor = torch.from_numpy(frame.transpose(2, 0, 1))[None].to(self.device)
        with torch.no_grad():
            posterior = self._pipe.vae.encode(tensor).latent_dist
            latent = posterior.mode() * self._pipe.vae.config.scaling_factor
        return latent[0].cpu().numpy().astype(np.float64)

    def decode(self, latent: np.ndarray) -> bytes:
        torch = self._torch
        from PIL import Image

        tensor = torch.from_numpy(np.asarray(latent, dtype=np.float32))[None].to(self.device)
        with torch.no_grad():
            frame = self._pipe.vae.decode(
                tensor / self._pipe.vae.config.scaling_factor
            ).sample[0]
        pixels = (
            ((frame.cpu().numpy().transpose(1, 2, 0) + 1.0) * 127.5)
            .clip(0, 255)
            .astype(np.uint8)
        )
        buf = io.BytesIO()
        Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()
