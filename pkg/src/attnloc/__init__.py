"""Visual localization against a keypoint map with a pose cost volume.

Modules: ``geometry`` (poses, offsets, projection), ``features`` (descriptor
pyramids), ``selection`` (FPS/WFPS), ``mapdb`` (map nodes and files),
``matching`` (cost volume and soft-argmax), ``losses``, ``pipeline``,
``synth`` (synthetic worlds), ``evaluation``, ``benchmark`` and ``cli``.
"""

__version__ = "0.1.0"
