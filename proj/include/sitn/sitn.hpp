#pragma once

#include "sitn/error.hpp"
#include "sitn/hash.hpp"
#include "sitn/autograd.hpp"
#include "sitn/data.hpp"
#include "sitn/encoder.hpp"
#include "sitn/ssl_losses.hpp"
#include "sitn/optimizer.hpp"
#include "sitn/checkpoint.hpp"
#include "sitn/training.hpp"
#include "sitn/evaluation.hpp"
#include "sitn/config.hpp"
