"""
Steganalysis prompt wording.
"""

STEGANALYSIS_DESCRIPTION = (
    "You are a linguistic steganalysis expert. Cover texts are sampled freely "
    "from a language model. Stego texts are produced by a system that steers "
    "each choice with secret bits, so their letter statistics drift away from "
    "natural text. Read the input, compare it with ordinary text and decide "
    "which kind it is."
)

STEGANALYSIS_INSTRUCTION = "Is the input text cover or stego?"

CLASSIFICATION_INSTRUCTION = "Is it stego?\n"
