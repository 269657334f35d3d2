"""
The four caption metrics on hand-checkable cases
================================================

BLEU, ROUGE-L, METEOR, and CIDEr each punish a different failure
mode.  A few two-line corpora make the mechanics visible.
"""

from dualcap.metrics import ScoredCorpus, bleu, cider, meteor, rouge_l, score_report

# BLEU clips repeated n-grams: "the the the" earns only one "the"
corpus = ScoredCorpus.from_texts({"img0": ("the the the", ["the cat"])})
print("BLEU-1 of 'the the the' vs 'the cat':", bleu(corpus, 1), "(= 1/3, clipped)")

# ROUGE-L rewards the longest common subsequence, order-sensitively
corpus = ScoredCorpus.from_texts({"img0": ("a b c d e", ["a b c d f"])})
print("ROUGE-L with 4 of 5 in sequence:", rouge_l(corpus))

# METEOR docks a fragmentation penalty even on a perfect match
corpus = ScoredCorpus.from_texts({"img0": ("red square", ["red square"])})
print("METEOR on an identical pair:", meteor(corpus), "(1 - 0.5 * (1/2)^3)")

# word order costs METEOR chunks but not unigram BLEU
swapped = ScoredCorpus.from_texts({"img0": ("square red", ["red square"])})
print("METEOR with the words swapped:", meteor(swapped))
print("BLEU-1 with the words swapped:", bleu(swapped, 1))

# CIDEr downweights n-grams every caption shares (tf-idf over the corpus)
corpus = ScoredCorpus.from_texts({
    "img0": ("a red square", ["a red square"]),
    "img1": ("a blue circle", ["a blue circle"]),
    "img2": ("a red circle", ["a green triangle"]),
})
print("\nCIDEr over a 3-image corpus:", round(cider(corpus), 4))

# score_report bundles all seven numbers for a corpus
print("\nfull report:", score_report(corpus))
