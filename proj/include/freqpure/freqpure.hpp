#pragma once

#include "freqpure/attack.hpp"
#include "freqpure/bench.hpp"
#include "freqpure/classifier.hpp"
#include "freqpure/config.hpp"
#include "freqpure/diffusion.hpp"
#include "freqpure/error.hpp"
#include "freqpure/fft.hpp"
#include "freqpure/io.hpp"
#include "freqpure/models.hpp"
#include "freqpure/nn.hpp"
#include "freqpure/spectral.hpp"
#include "freqpure/tensor.hpp"
