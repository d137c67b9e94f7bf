"""clinprompt: a frozen toy GPT plus trainable soft prompts, with codecs that
turn structured clinical-style annotations into text-to-text samples and back.
"""

__version__ = "0.1.0"
