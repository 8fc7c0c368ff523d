# semantic-token supply: k-means tokenizer, synthetic corpus and code corpora
