"""T5-style encoder-decoder with the 1decT5 and EncT5 fine-tuning variants.

Modules: ``tensor`` (numpy autodiff), ``model``, ``packing``, ``checkpoint``
(format and surgery), ``adafactor``, ``training``, ``tasks``, ``metrics``,
``tokenizer``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
