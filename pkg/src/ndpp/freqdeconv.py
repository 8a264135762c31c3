"""Frequency-domain whitening and the spatial kernel it induces.

Dividing a signal's spectrum by its own magnitude flattens the spectrum,
which removes autocorrelation; transported back to the spatial domain the
corresponding kernel shows a positive center with a negative surround when
the input carries the low-frequency-heavy statistics of natural images.

Transforms are direct O(n^2) summations (a matrix product against the
Fourier basis), which is plenty at the demonstration sizes this module is
for; nothing here sits on the training path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

MAGNITUDE_DELTA = 1e-12


@dataclass
class Spectrum:
    """Real/imaginary parts of a discrete Fourier transform."""

    re: np.ndarray
    im: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.re, self.im)


def _basis(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def dft(x) -> Spectrum:
    """Discrete Fourier transform by direct summation (1-d or 2-d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ContractError("dft of an empty signal")
    if x.ndim == 1:
        spec = _basis(x.shape[0]) @ x.astype(np.complex128)
    elif x.ndim == 2:
        spec = _basis(x.shape[0]) @ x.astype(np.complex128) @ _basis(x.shape[1])
    else:
        raise ContractError(f"dft supports 1-d or 2-d signals, got {x.shape}")
    return Spectrum(re=spec.real.copy(), im=spec.imag.copy())


def idft(s: Spectrum) -> np.ndarray:
    """Inverse transform; returns the real part (inputs here are real signals)."""
    spec = s.re + 1j * s.im
    if spec.ndim == 1:
        n = spec.shape[0]
        out = _basis(n).conj() @ spec / n
    elif spec.ndim == 2:
        h, w = spec.shape
        out = _basis(h).conj() @ spec @ _basis(w).conj() / (h * w)
    else:
        raise ContractError(f"idft supports 1-d or 2-d spectra, got {spec.shape}")
    return out.real.copy()


def spectral_whiten(x) -> np.ndarray:
    """Normalize the spectrum to unit magnitude: F(x) / |F(x)|, stabilized."""
    s = dft(x)
    mag = s.magnitude() + MAGNITUDE_DELTA
    return idft(Spectrum(re=s.re / mag, im=s.im / mag))


def deconv_kernel(image) -> np.ndarray:
    """Spatial kernel of the whitening filter 1 / |F(x)|, zero frequency centered."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ContractError(f"deconv_kernel expects a 2-d image, got {image.shape}")
    inverse_mag = 1.0 / (dft(image).magnitude() + MAGNITUDE_DELTA)
    kernel = idft(Spectrum(re=inverse_mag, im=np.zeros_like(inverse_mag)))
    h, w = kernel.shape
    return np.roll(kernel, (h // 2, w // 2), axis=(0, 1))


def kernel_sign_summary(kernel: np.ndarray) -> tuple[float, float]:
    """(center value, mean of the 4-neighborhood) of a centered kernel."""
    h, w = kernel.shape
    ci, cj = h // 2, w // 2
    neighbors = (kernel[ci - 1, cj] + kernel[ci + 1, cj]
                 + kernel[ci, cj - 1] + kernel[ci, cj + 1]) / 4.0
    return float(kernel[ci, cj]), float(neighbors)
