"""Smoke test for the pyvqmark extension.

Build and run from the workspace root:

    cargo build --release -p vqmark-python --features extension-module
    cp target/release/libpyvqmark.so crates/python/python/pyvqmark.so
    python3 crates/python/python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pyvqmark as vq


def main():
    textures = vq.generate_textures(count=8, size=32, seed=1)
    assert len(textures) == 8 and textures[0].shape == (3, 32, 32)

    codec = vq.Codec.train(
        textures, image_size=32, grid=4, codebook_size=16, dim=4, width=4, epochs=1, batch=4
    )
    assert codec.payload_bits == 128

    secret = textures[0]
    bits = codec.encode_payload(secret)
    assert len(bits) == 128

    container = vq.embed(bits, key=0x2A, seed=0)
    assert container.shape == (3, 64, 64)
    recovered = vq.extract(container, len(bits), key=0x2A)
    assert recovered == bits, "clean carrier must round trip"
    assert vq.bit_accuracy(bits, recovered) == 1.0

    wrong = vq.extract(container, len(bits), key=0x2B)
    assert vq.bit_accuracy(bits, wrong) < 0.8

    image = codec.decode_payload(recovered)
    assert image.shape == secret.shape
    print(f"psnr {vq.psnr(secret, image):.2f} dB, ssim {vq.ssim(secret, image):.3f}")

    noisy = vq.attack(container, "gaussian_noise", 0.1, seed=3)
    print(f"gaussian 0.1 accuracy {vq.bit_accuracy(bits, vq.extract(noisy, len(bits))):.3f}")

    assert vq.whiten(vq.whiten(bits, 7), 7) == bits
    assert vq.Payload.from_hex(bits.to_hex(), len(bits)) == bits

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "codec.rsmm")
        codec.save(path)
        again = vq.Codec.load(path)
        assert again.encode_indices(secret) == codec.encode_indices(secret)

    print("ok")


if __name__ == "__main__":
    main()
