#pragma once

#include "rose/random.hpp"
#include "rose/vocab.hpp"
#include "rose/policy.hpp"
#include "rose/checkpoint.hpp"
#include "rose/metrics.hpp"
#include "rose/rollout.hpp"
#include "rose/credit.hpp"
#include "rose/objective.hpp"
#include "rose/tasks.hpp"
#include "rose/config.hpp"
#include "rose/trainer.hpp"
#include "rose/jsonl.hpp"
