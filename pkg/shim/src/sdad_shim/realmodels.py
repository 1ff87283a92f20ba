"""Real model adapters: open checkpoints behind the same five endpoints.

Heavy imports happen here and only here, at startup, so stub mode never
pays for them and a missing dependency surfaces as one clear diagnostic
instead of a mid-request stack trace.  Checkpoint identifiers come from
the config; they are deployment choices, not part of the wire contract.

The configured embedding dimension is validated against the loaded
encoder before the server starts taking requests, because clients size
their buffers from /v1/info and a mismatch there poisons everything
downstream.
"""

from __future__ import annotations

import io

from PIL import Image

from .server import ShimConfig, ShimStartupError

# ControlNet conditioning rides on a fixed base pipeline; fork and change
# this constant for a different base.
SD_BASE = "runwayml/stable-diffusion-v1-5"

GENERATION_STEPS = 30


def _import_stack():
    """Import the model stack in one place so the error names the gap."""
    try:
        import torch
        import open_clip
        from transformers import pipeline
        from diffusers import ControlNetModel, StableDiffusionControlNetPipeline
    except ImportError as e:
        raise ShimStartupError(
            f"real mode needs the model stack ({e}); install the [real] extra"
        ) from e
    return torch, open_clip, pipeline, ControlNetModel, StableDiffusionControlNetPipeline


def _decode_rgb(data: bytes) -> Image.Image:
    return Image.open(io.BytesIO(data)).convert("RGB")


class RealModels:
    """Loaded model set; every method maps one endpoint."""

    def __init__(self, config: ShimConfig):
        (
            torch,
            open_clip,
            hf_pipeline,
            ControlNetModel,
            StableDiffusionControlNetPipeline,
        ) = _import_stack()
        self.config = config
        self._torch = torch
        arch, _, pretrained = config.embed_model.partition("/")
        if not pretrained:
            raise ShimStartupError(
                "embed_model must be <architecture>/<pretrained tag>, "
                f"got {config.embed_model!r}"
            )
        self._clip, _, self._preprocess = open_clip.create_model_and_transforms(
            arch, pretrained=pretrained, device=config.device
        )
        self._clip.eval()
        self._tokenize = open_clip.get_tokenizer(arch)
        with torch.no_grad():
            probe = self._clip.encode_text(
                self._tokenize(["probe"]).to(config.device)
            )
        actual = int(probe.shape[-1])
        if actual != config.dimension:
            raise ShimStartupError(
                f"encoder {config.embed_model} produces dimension {actual}, "
                f"configured dimension is {config.dimension}"
            )
        self._captioner = hf_pipeline(
            "image-to-text", model=config.caption_model, device=config.device
        )
        controlnet = ControlNetModel.from_pretrained(config.generate_model)
        self._generator = StableDiffusionControlNetPipeline.from_pretrained(
            SD_BASE, controlnet=controlnet
        ).to(config.device)

    def embed_image(self, image_png: bytes) -> list[float]:
        torch = self._torch
        image = self._preprocess(_decode_rgb(image_png)).unsqueeze(0)
        with torch.no_grad():
            features = self._clip.encode_image(image.to(self.config.device))
        return [float(x) for x in features[0].cpu()]

    def embed_text(self, text: str) -> list[float]:
        torch = self._torch
        tokens = self._tokenize([text]).to(self.config.device)
        with torch.no_grad():
            features = self._clip.encode_text(tokens)
        return [float(x) for x in features[0].cpu()]

    def caption(self, image_png: bytes, prompt: str) -> str:
        image = _decode_rgb(image_png)
        try:
            # conditional captioning where the model supports a text prefix
            outputs = self._captioner(image, prompt=prompt)
        except TypeError:
            outputs = self._captioner(image)
        return outputs[0]["generated_text"]

    def generate(self, mask_png: bytes, caption: str, seed: int) -> bytes:
        torch = self._torch
        mask = _decode_rgb(mask_png)
        # the pipeline wants multiple-of-8 sides; render rounded up, then
        # bring the result back to the mask's exact dimensions
        w = max(8, (mask.width + 7) // 8 * 8)
        h = max(8, (mask.height + 7) // 8 * 8)
        control = mask.resize((w, h), Image.NEAREST)
        generator = torch.Generator(device=self.config.device).manual_seed(seed)
        result = self._generator(
            prompt=caption,
            image=control,
            num_inference_steps=GENERATION_STEPS,
            generator=generator,
        ).images[0]
        if result.size != mask.size:
            result = result.resize(mask.size, Image.BICUBIC)
        buf = io.BytesIO()
        result.save(buf, format="PNG")
        return buf.getvalue()

    def model_ids(self) -> dict:
        return {
            "embed": self.config.embed_model,
            "caption": self.config.caption_model,
            "generate": self.config.generate_model,
        }
