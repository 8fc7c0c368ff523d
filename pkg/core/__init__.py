# nn-core: differentiable building blocks shared by the acoustic model and the LM
